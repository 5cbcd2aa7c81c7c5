"""Training workflow: masked MSE, RAdam+Lookahead, plateau-triggered cosine
annealing, a learning-rate finder, and the TBPTT epoch loop with hidden-state
and AR-output carry across chunks.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import numkit as nk
from .data import SequenceData, Standardizer, WindowPlan, ChunkBatch, fit_standardizer, sample_windows, split_estimation
from .errors import (
    DimensionError,
    FinderError,
    LossError,
    OptimizerError,
    ParameterError,
    TrainingError,
)
from .models import HiddenState, Model, ModelSpec, ParamStore, receptive_field

Array = np.ndarray


@dataclass
class TrainConfig:
    """Optimizer, schedule, masking and windowing settings."""

    max_epochs: int = 50
    batch_size: int = 16
    chunk_len: int = 512
    window_len: int = 4096
    lr_max: float | None = None  # None: determined by the lr finder
    lr_min: float = 1e-5
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    plateau_patience: int = 3
    grad_clip: float | None = 1.0
    seed: int = 0
    teacher_forcing: bool = False
    warmup_mask_n: int | None = None  # None: min(2**depth - 1, chunk_len // 2)
    valid_fraction: float = 0.2

    def __post_init__(self) -> None:
        b1, b2 = self.betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise ParameterError(f"betas must lie in (0, 1), got {self.betas}")
        if self.lookahead_k < 1:
            raise ParameterError("lookahead_k must be >= 1")
        if not 0.0 < self.lookahead_alpha <= 1.0:
            raise ParameterError("lookahead_alpha must be in (0, 1]")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ParameterError("max_epochs and batch_size must be >= 1")
        if self.lr_max is not None and self.lr_max <= 0:
            raise ParameterError("lr_max must be positive")

    def plan(self) -> WindowPlan:
        return WindowPlan(self.window_len, self.chunk_len, self.batch_size, self.seed)


@dataclass
class TrainState:
    """Optimizer moments, lookahead slow weights, and schedule bookkeeping."""

    step: int
    m: dict[str, Array]
    v: dict[str, Array]
    slow: dict[str, Array]
    lr: float
    phase: str = "constant"  # "constant" | "cosine"
    best_valid_rmse: float = math.inf
    epochs_since_improvement: int = 0
    epoch: int = 0
    cosine_start: int = 0
    cosine_total: int = 0

    @classmethod
    def init(cls, params: ParamStore, lr: float) -> "TrainState":
        return cls(
            step=0,
            m=params.zeros_like(),
            v=params.zeros_like(),
            slow={k: v.copy() for k, v in params.items()},
            lr=lr,
        )


# ---------------------------------------------------------------------------
# loss and masking
# ---------------------------------------------------------------------------


def masked_mse(y_hat: Array, y: Array, mask: Array | None = None) -> float:
    """Mean squared error over unmasked elements; mask marks excluded samples."""
    loss, _ = masked_mse_grad(y_hat, y, mask)
    return loss


def masked_mse_grad(
    y_hat: Array, y: Array, mask: Array | None = None
) -> tuple[float, Array]:
    """Loss plus its gradient w.r.t. y_hat; masked samples get exact zeros."""
    if y_hat.shape != y.shape:
        raise DimensionError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    d = y_hat - y
    n_channels = y.shape[-1] if y.ndim >= 1 else 1
    if mask is None:
        n = d.size
        if n == 0:
            raise LossError("empty batch")
        loss = float(np.sum(d * d) / n)
        return loss, (2.0 / n) * d
    if mask.shape != y.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} != sample shape {y.shape[:-1]}")
    keep = ~mask
    n = int(keep.sum()) * n_channels
    if n == 0:
        raise LossError(
            "every sample in the batch is masked; check window/chunk sizes "
            "against the warm-up mask length"
        )
    d = d * keep[..., None]
    loss = float(np.sum(d * d) / n)
    return loss, (2.0 / n) * d


def resolved_warmup_mask(spec: ModelSpec, config: TrainConfig) -> int:
    """Leading samples excluded from the loss in each training window."""
    if spec.arch == "tcn":
        return receptive_field(spec.depth)
    if config.warmup_mask_n is not None:
        return config.warmup_mask_n
    return min(2 ** spec.depth - 1, config.chunk_len // 2)


def chunk_loss_mask(spec: ModelSpec, config: TrainConfig, batch: ChunkBatch) -> Array | None:
    """Boolean (B, T) array, True where the sample is excluded from the loss."""
    n_mask = resolved_warmup_mask(spec, config)
    B, T, _ = batch.y.shape
    window_pos = batch.offset + np.arange(T)
    row = window_pos < n_mask
    if not row.any():
        return None
    return np.broadcast_to(row, (B, T)).copy()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def radam_lookahead_step(
    params: ParamStore,
    grads: dict[str, Array],
    state: TrainState,
    config: TrainConfig,
) -> None:
    """One RAdam update with variance rectification, plus lookahead sync.

    rho_inf = 2/(1-b2) - 1 and rho_t = rho_inf - 2 t b2^t / (1 - b2^t); the
    rectified adaptive step applies when rho_t > 4, otherwise the update is
    the un-adapted bias-corrected momentum. Weight decay is decoupled. Every
    lookahead_k steps: slow += alpha * (fast - slow), fast = slow.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.betas
    lr = state.lr
    b1t = b1 ** t
    b2t = b2 ** t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    adaptive = rho_t > 4.0
    if adaptive:
        rect = math.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    for name in params.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1t)
        if adaptive:
            step_vec = lr * rect * m_hat / (np.sqrt(v / (1.0 - b2t)) + config.eps)
        else:
            step_vec = lr * m_hat
        p = params[name]
        if config.weight_decay:
            step_vec = step_vec + (lr * config.weight_decay) * p
        p -= step_vec
    if t % config.lookahead_k == 0:
        for name in params.names():
            slow = state.slow[name]
            slow += config.lookahead_alpha * (params[name] - slow)
            np.copyto(params[name], slow)


def clip_gradients(grads: dict[str, Array], max_norm: float | None) -> float:
    """Global-norm clipping; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def cosine_schedule(lr_max: float, lr_min: float, t: int, total: int) -> float:
    """lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / total))."""
    if total == 0:
        raise ParameterError("cosine schedule length must be > 0")
    if not 0 <= t <= total:
        raise ParameterError(f"schedule step {t} outside [0, {total}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# chunked forward/backward plumbing
# ---------------------------------------------------------------------------


def _chunk_step(
    model: Model,
    batch: ChunkBatch,
    state_h: HiddenState,
    config: TrainConfig,
    rng,
):
    """Forward + loss + backward for one chunk; state crosses as values only."""
    spec = model.spec
    teacher = None
    if config.teacher_forcing and spec.mode == "ar":
        teacher = batch.y
    y_hat, new_state, cache = model.forward(
        batch.u, state_h, training=True, rng=rng, teacher=teacher, return_cache=True
    )
    mask = chunk_loss_mask(spec, config, batch)
    loss, g = masked_mse_grad(y_hat, batch.y, mask)
    grads, _ = model.backward(cache, g)
    d = y_hat - batch.y
    if mask is not None:
        d = d * (~mask)[..., None]
        n_samples = int((~mask).sum())
    else:
        n_samples = d.shape[0] * d.shape[1]
    ch_sq = np.sum(d * d, axis=(0, 1))
    return loss, grads, new_state, ch_sq, n_samples


@dataclass
class EpochMetrics:
    rmse: float  # standardized units, over unmasked samples
    channel_sq: Array
    n_samples: int
    n_steps: int


def train_epoch(model: Model, data: SequenceData, config: TrainConfig, state: TrainState) -> EpochMetrics:
    """One pass of freshly drawn windows, chunk by chunk.

    `data` must already be standardized. Hidden state (and for AR models the
    last generated output) carries across chunk boundaries as plain values,
    so gradients stay inside each chunk.
    """
    epoch = state.epoch
    rng = np.random.default_rng([config.seed, epoch, 1])
    ch_sq_total: Array | None = None
    n_total = 0
    n_steps = 0
    state_h: HiddenState | None = None
    for batch in sample_windows(data, config.plan(), epoch):
        if batch.is_first:
            state_h = model.initial_state(batch.u.shape[0])
        loss, grads, state_h, ch_sq, n_samples = _chunk_step(model, batch, state_h, config, rng)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at optimizer step {state.step}")
        clip_gradients(grads, config.grad_clip)
        radam_lookahead_step(model.params, grads, state, config)
        ch_sq_total = ch_sq if ch_sq_total is None else ch_sq_total + ch_sq
        n_total += n_samples
        n_steps += 1
    state.epoch += 1
    n_elems = max(n_total * ch_sq_total.size, 1)
    return EpochMetrics(
        rmse=math.sqrt(float(ch_sq_total.sum()) / n_elems),
        channel_sq=ch_sq_total,
        n_samples=n_total,
        n_steps=n_steps,
    )


# ---------------------------------------------------------------------------
# learning-rate finder
# ---------------------------------------------------------------------------


@dataclass
class FinderResult:
    suggestion: float
    lrs: list[float]
    losses: list[float]
    smoothed: list[float]


def lr_sweep(
    params: ParamStore,
    batches: Iterator,
    loss_grad_fn: Callable,
    config: TrainConfig,
    *,
    lr_start: float = 1e-7,
    lr_end: float = 1.0,
    num_steps: int = 100,
    smooth_momentum: float = 0.98,
    abort_factor: float = 4.0,
) -> FinderResult:
    """Geometric lr sweep with exponentially smoothed loss tracking.

    The bias-corrected smoothed loss gates the abort (once it exceeds
    abort_factor times the best smoothed value seen); the suggestion is the
    lr at the raw-loss minimum divided by 10.
    """
    state = TrainState.init(params, lr_start)
    ratio = (lr_end / lr_start) ** (1.0 / max(num_steps - 1, 1))
    smoothed = 0.0
    best = math.inf
    lrs: list[float] = []
    losses: list[float] = []
    track: list[float] = []
    for i in range(num_steps):
        lr_i = lr_start * ratio ** i
        batch = next(batches)
        with np.errstate(all="ignore"):
            loss, grads = loss_grad_fn(params, batch)
        finite = math.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            if i == 0:
                raise FinderError(
                    "loss diverged on the first finder batch; lower the sweep start"
                )
            break
        smoothed = smooth_momentum * smoothed + (1.0 - smooth_momentum) * loss
        corrected = smoothed / (1.0 - smooth_momentum ** (i + 1))
        lrs.append(lr_i)
        losses.append(loss)
        track.append(corrected)
        if corrected > abort_factor * best:
            break
        best = min(best, corrected)
        state.lr = lr_i
        radam_lookahead_step(params, grads, state, config)
    if not losses:
        raise FinderError("lr sweep recorded no finite losses")
    idx = int(np.argmin(losses))
    return FinderResult(suggestion=lrs[idx] / 10.0, lrs=lrs, losses=losses, smoothed=track)


def _chunk_stream(model: Model, data: SequenceData, config: TrainConfig, epoch0: int):
    """Endless chunk batches with per-window state, for the finder sweep."""
    rng = np.random.default_rng([config.seed, 2])
    epoch = epoch0
    state_h = None
    while True:
        for batch in sample_windows(data, config.plan(), epoch):
            if batch.is_first:
                state_h = model.initial_state(batch.u.shape[0])
            yield batch, state_h, rng
        epoch += 1


def lr_finder(model: Model, data: SequenceData, config: TrainConfig, *, num_steps: int = 100) -> float:
    """Suggest lr_max by sweeping on a clone; `data` must be standardized.

    The training model is untouched: the sweep runs on copied parameters.
    """
    clone = model.clone()
    stream = _chunk_stream(clone, data, config, epoch0=1_000_000)

    def loss_grad(params: ParamStore, item):
        batch, state_h, rng = item
        loss, grads, new_state, _, _ = _chunk_step(clone, batch, state_h, config, rng)
        return loss, grads

    result = lr_sweep(clone.params, stream, loss_grad, config, num_steps=num_steps)
    return result.suggestion


# ---------------------------------------------------------------------------
# full fit loop
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    train_rmse: float
    valid_rmse: float
    lr: float
    wall_seconds: float


@dataclass
class FitResult:
    params: ParamStore  # best-validation checkpoint
    history: list[HistoryRow]
    standardizer: Standardizer
    lr_max: float
    best_epoch: int
    best_valid_rmse: float
    wall_seconds: float


def _pooled_validation_rmse(model: Model, valid: SequenceData, std: Standardizer,
                            transient_n: int) -> float:
    from .inference import simulate

    sq = 0.0
    n = 0
    for u, y in valid.sequences:
        y_hat = simulate(model, u, std)
        skip = min(transient_n, y.shape[0] - 1)
        d = y_hat[skip:] - y[skip:]
        sq += float(np.sum(d * d))
        n += d.size
    return math.sqrt(sq / max(n, 1))


def fit(model: Model, data: SequenceData, config: TrainConfig) -> FitResult:
    """Train with a constant-lr phase, then cosine annealing after a plateau.

    `data` is the raw estimation set; it is split (contiguous tails) into
    train/validation, standardized on the train part only, and windowed.
    Returns the best-validation checkpoint; the model is left holding it.
    """
    t_start = time.perf_counter()
    train, valid = split_estimation(data, config.valid_fraction, config.seed)
    std = fit_standardizer(train)
    train_std = std.apply_data(train)
    lr_max = config.lr_max
    if lr_max is None:
        lr_max = lr_finder(model, train_std, config)
    state = TrainState.init(model.params, lr_max)
    history: list[HistoryRow] = []
    best_params = model.params.copy()
    best_rmse = math.inf
    best_epoch = -1
    for epoch in range(config.max_epochs):
        if state.phase == "cosine":
            t_c = epoch - state.cosine_start
            state.lr = cosine_schedule(lr_max, config.lr_min, min(t_c, state.cosine_total),
                                       state.cosine_total)
        t0 = time.perf_counter()
        metrics = train_epoch(model, train_std, config, state)
        valid_rmse = _pooled_validation_rmse(model, valid, std, data.transient_n)
        wall = time.perf_counter() - t0
        train_rmse_phys = math.sqrt(
            float(np.sum(std.y_std ** 2 * metrics.channel_sq))
            / max(metrics.n_samples * metrics.channel_sq.size, 1)
        )
        history.append(HistoryRow(epoch, train_rmse_phys, valid_rmse, state.lr, wall))
        if valid_rmse < best_rmse:
            best_rmse = valid_rmse
            best_epoch = epoch
            best_params = model.params.copy()
            state.best_valid_rmse = valid_rmse
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
        if (
            state.phase == "constant"
            and state.epochs_since_improvement >= config.plateau_patience
            and epoch + 1 < config.max_epochs
        ):
            state.phase = "cosine"
            state.cosine_start = epoch + 1
            state.cosine_total = config.max_epochs - (epoch + 1)
    model.params = best_params
    return FitResult(
        params=best_params,
        history=history,
        standardizer=std,
        lr_max=lr_max,
        best_epoch=best_epoch,
        best_valid_rmse=best_rmse,
        wall_seconds=time.perf_counter() - t_start,
    )


def write_history_csv(path: str | Path, history: list[HistoryRow]) -> None:
    """epoch, train_rmse, valid_rmse, lr, wall_seconds; full-precision floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_rmse", "valid_rmse", "lr", "wall_seconds"])
        for row in history:
            writer.writerow(
                [row.epoch, repr(row.train_rmse), repr(row.valid_rmse),
                 repr(row.lr), repr(row.wall_seconds)]
            )
