"""Free-running simulation, RMSE evaluation with transient skip, the cached
fast AR-TCN generator, and wall-clock timing harnesses for training and
inference cost versus sequence length.
"""

from __future__ import annotations

import gc
import statistics
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .data import Standardizer
from .errors import DimensionError, InputError, ParameterError, UsageError
from .models import (
    ConvCache,
    Model,
    ModelSpec,
    conv_cache_step,
    receptive_field,
)

Array = np.ndarray


@dataclass
class SimReport:
    """One simulation run: trajectory, score, and cost."""

    y_hat: Array
    rmse: float  # reporting units (unit_scale applied)
    transient_skipped: int
    wall_seconds: float


def simulate(model: Model, u: Array, standardizer: Standardizer) -> Array:
    """Free-running trajectory for one sequence, in physical units.

    u is (T, I) raw input; it is standardized internally, the model runs from
    zero initial state, and the output is de-standardized.
    """
    u = nk.as_f64(u)
    if u.ndim != 2:
        raise InputError(f"simulate expects a (T, channels) sequence, got shape {u.shape}")
    if u.shape[1] != model.spec.input_dim:
        raise InputError(
            f"sequence has {u.shape[1]} input channels, model expects {model.spec.input_dim}"
        )
    u_std = standardizer.apply_u(u)[None, :, :]
    state = model.initial_state(1)
    y_std, _ = model.forward(u_std, state)
    return standardizer.invert_y(y_std[0])


def simulate_report(
    model: Model,
    u: Array,
    y: Array,
    standardizer: Standardizer,
    transient_n: int,
    unit_scale: float = 1.0,
) -> SimReport:
    t0 = time.perf_counter()
    y_hat = simulate(model, u, standardizer)
    wall = time.perf_counter() - t0
    rmse = evaluate_rmse(y_hat, y, transient_n, unit_scale)
    return SimReport(y_hat=y_hat, rmse=rmse, transient_skipped=transient_n, wall_seconds=wall)


def fast_ar_step(cache: ConvCache, x_t: Array) -> tuple[Array, ConvCache]:
    """One cached AR-TCN step: per-layer taps come from ring buffers, so the
    cost is depth * hidden^2 regardless of how much history has passed."""
    y_t = conv_cache_step(cache, x_t)
    return y_t, cache


def evaluate_rmse(y_hat: Array, y: Array, transient_n: int, unit_scale: float = 1.0) -> float:
    """sqrt(mean((y_hat - y)^2)) over t >= transient_n, scaled for reporting."""
    y_hat = nk.as_f64(y_hat)
    y = nk.as_f64(y)
    if y_hat.shape != y.shape:
        raise DimensionError(f"shapes differ: {y_hat.shape} vs {y.shape}")
    T = y.shape[0]
    if transient_n < 0 or transient_n >= T:
        raise ParameterError(f"transient_n {transient_n} must be in [0, {T})")
    d = y_hat[transient_n:] - y[transient_n:]
    return float(np.sqrt(np.mean(d * d))) * unit_scale


# ---------------------------------------------------------------------------
# timing harnesses
# ---------------------------------------------------------------------------

_bench_lock = threading.Lock()


@dataclass
class BenchTable:
    """Raw per-repeat timings plus medians per (variant, mode, length)."""

    rows: list[dict] = field(default_factory=list)

    def medians(self) -> list[dict]:
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["variant"], r["mode"], r["seq_len"]), []).append(
                r["wall_seconds"]
            )
        return [
            {"variant": k[0], "mode": k[1], "seq_len": k[2],
             "median_seconds": statistics.median(v)}
            for k, v in sorted(groups.items())
        ]

    def median_for(self, variant: str, mode: str, seq_len: int) -> float:
        for m in self.medians():
            if (m["variant"], m["mode"], m["seq_len"]) == (variant, mode, seq_len):
                return m["median_seconds"]
        raise KeyError((variant, mode, seq_len))


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # measurements just get a bit noisier
        from contextlib import nullcontext

        return nullcontext()


def _bench_model(spec: ModelSpec, seed: int) -> Model:
    """Model with damped weights: free-running feedback must stay bounded over
    thousands of steps (timing does not depend on the values)."""
    model = Model.create(spec, seed)
    for name in model.params.names():
        model.params[name] *= 0.3
    return model


def _check_tcn_lengths(specs: list[ModelSpec], seq_lengths: list[int]) -> None:
    for spec in specs:
        if spec.arch != "tcn":
            continue
        need = receptive_field(spec.depth)
        short = [L for L in seq_lengths if L < need]
        if short:
            raise ParameterError(
                f"TCN depth {spec.depth} needs sequences of at least {need} samples; "
                f"got lengths {short}"
            )


def _timed_cells(specs, seq_lengths, make_runner, repeats, warmup):
    """Warm every cell, then interleave measured repeats round-robin so slow
    clock drift cannot masquerade as a length trend."""
    cells = []
    for spec in specs:
        for L in seq_lengths:
            cells.append((spec, L, make_runner(spec, L)))
    table = BenchTable()
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        with _limit_threads():
            for _, _, run in cells:
                for _ in range(warmup):
                    run()
            for rep in range(repeats):
                for spec, L, run in cells:
                    t0 = time.perf_counter()
                    run()
                    dt = time.perf_counter() - t0
                    table.rows.append(
                        {"variant": spec.arch.upper(), "mode": spec.mode.upper(),
                         "seq_len": L, "repeat": rep, "wall_seconds": dt}
                    )
    finally:
        if gc_was_enabled:
            gc.enable()
    return table


def bench_training_time(
    specs: list[ModelSpec],
    seq_lengths: list[int],
    batch_size: int = 16,
    repeats: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> BenchTable:
    """Median wall time of one forward+backward+optimizer step per mini-batch."""
    from .training import TrainConfig, TrainState, masked_mse_grad, radam_lookahead_step

    _check_tcn_lengths(specs, seq_lengths)
    if not _bench_lock.acquire(blocking=False):
        raise UsageError("timing harness already running in this process")
    try:
        rng = np.random.default_rng(seed)

        def make_runner(spec: ModelSpec, L: int):
            model = _bench_model(spec, seed)
            u = rng.standard_normal((batch_size, L, spec.input_dim))
            y = rng.standard_normal((batch_size, L, spec.output_dim))
            config = TrainConfig(chunk_len=L, window_len=L, batch_size=batch_size,
                                 lr_max=1e-5)
            state = TrainState.init(model.params, 1e-5)

            def run():
                y_hat, _, cache = model.forward(
                    u, model.initial_state(batch_size), training=True, return_cache=True
                )
                _, g = masked_mse_grad(y_hat, y)
                grads, _ = model.backward(cache, g)
                radam_lookahead_step(model.params, grads, state, config)

            return run

        return _timed_cells(specs, seq_lengths, make_runner, repeats, warmup)
    finally:
        _bench_lock.release()


def bench_inference_time(
    specs: list[ModelSpec],
    seq_lengths: list[int],
    repeats: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> BenchTable:
    """Median wall time of simulating one sequence per (variant, length)."""
    _check_tcn_lengths(specs, seq_lengths)
    if not _bench_lock.acquire(blocking=False):
        raise UsageError("timing harness already running in this process")
    try:
        rng = np.random.default_rng(seed)

        def make_runner(spec: ModelSpec, L: int):
            model = _bench_model(spec, seed)
            std = Standardizer.identity(spec.input_dim, spec.output_dim)
            u = rng.standard_normal((L, spec.input_dim))

            def run():
                simulate(model, u, std)

            return run

        return _timed_cells(specs, seq_lengths, make_runner, repeats, warmup)
    finally:
        _bench_lock.release()
