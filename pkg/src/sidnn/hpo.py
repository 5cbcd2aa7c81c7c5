"""Asynchronous successive halving (ASHA) over the training configuration.

Random search with early stopping: a trial finishing rung r is promoted to
rung r+1 iff its validation loss ranks within the top ceil(k/eta) of the k
results completed at rung r so far (ties favor the lower trial id), else it
stops. Every decision is appended to a JSON-lines event log, so a run can be
replayed and audited.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SequenceData
from .errors import BookkeepingError, ParameterError, SidnnError
from .models import Model, ModelSpec
from .training import TrainConfig, fit

STATUSES = ("running", "stopped", "promoted", "completed", "failed")


@dataclass(frozen=True)
class SearchSpace:
    """Per-hyperparameter sampling rules.

    lr and weight_decay draw log-uniformly; hidden and chunk_len draw from
    power-of-two sets; depth draws integer-uniformly over an inclusive range.
    """

    lr: tuple[float, float] = (1e-4, 1e-2)
    weight_decay: tuple[float, float] = (1e-6, 1e-3)
    hidden: tuple[int, ...] = (16, 32, 64, 128)
    depth: tuple[int, int] = (2, 10)
    chunk_len: tuple[int, ...] = (128, 256, 512, 1024)
    residual: tuple[bool, ...] = (True, False)

    def __post_init__(self) -> None:
        for name in ("lr", "weight_decay"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ParameterError(f"{name} bounds must be positive and ordered")
        if self.depth[0] < 1 or self.depth[0] > self.depth[1]:
            raise ParameterError("depth range must be ordered and >= 1")
        if not self.hidden or not self.chunk_len or not self.residual:
            raise ParameterError("categorical choices must be non-empty")

    def default_overlay(self) -> dict:
        """Geometric/median midpoint of the space; seeds the search."""
        return {
            "lr": math.sqrt(self.lr[0] * self.lr[1]),
            "weight_decay": math.sqrt(self.weight_decay[0] * self.weight_decay[1]),
            "hidden": self.hidden[len(self.hidden) // 2],
            "depth": (self.depth[0] + self.depth[1]) // 2,
            "chunk_len": self.chunk_len[len(self.chunk_len) // 2],
            "residual": self.residual[0],
        }


def sample_config(space: SearchSpace, seed: int, trial_index: int = 0) -> dict:
    """Independent draw per hyperparameter, deterministic per (seed, index)."""
    rng = np.random.default_rng([seed, trial_index])
    log_u = lambda lo, hi: float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return {
        "lr": log_u(*space.lr),
        "weight_decay": log_u(*space.weight_decay),
        "hidden": int(rng.choice(space.hidden)),
        "depth": int(rng.integers(space.depth[0], space.depth[1] + 1)),
        "chunk_len": int(rng.choice(space.chunk_len)),
        "residual": bool(rng.choice(np.asarray(space.residual))),
    }


@dataclass
class Rung:
    """One resource level: r_min * eta**index training epochs."""

    index: int
    resource: int
    results: list[tuple[int, float]] = field(default_factory=list)  # (trial_id, loss)


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    rungs: list[tuple[int, float]] = field(default_factory=list)  # (resource, loss)
    status: str = "running"

    @property
    def best_loss(self) -> float:
        return min((loss for _, loss in self.rungs), default=math.inf)


def asha_decide(rungs: list[Rung], trial_result: tuple[int, int, float], eta: int = 3) -> str:
    """"promote" iff the result ranks in the top ceil(k/eta) of its rung's k
    completed results, ties broken by lower trial id; else "stop"."""
    trial_id, rung_index, loss = trial_result
    rung = next((r for r in rungs if r.index == rung_index), None)
    if rung is None:
        raise BookkeepingError(f"result reported for unknown rung {rung_index}")
    if (trial_id, loss) not in rung.results:
        raise BookkeepingError(
            f"trial {trial_id} has no recorded result at rung {rung_index}"
        )
    ranked = sorted(rung.results, key=lambda r: (r[1], r[0]))
    k = len(ranked)
    cut = math.ceil(k / eta)
    position = ranked.index((trial_id, loss))
    return "promote" if position < cut else "stop"


@dataclass
class SearchEvent:
    trial_id: int
    rung: int
    epochs: int
    valid_rmse: float
    decision: str  # promote | stop | complete | fail
    timestamp: float

    def to_json(self) -> str:
        return json.dumps(
            {"trial_id": self.trial_id, "rung": self.rung, "epochs": self.epochs,
             "valid_rmse": self.valid_rmse, "decision": self.decision,
             "timestamp": self.timestamp}
        )


def replay_decisions(events: list[SearchEvent], eta: int = 3, num_rungs: int = 3,
                     r_min: int = 2) -> bool:
    """Re-run every promote/stop decision from the event log; True if all match."""
    rungs = [Rung(r, r_min * eta ** r) for r in range(num_rungs)]
    for ev in events:
        if ev.decision == "fail":
            continue
        rung = next((r for r in rungs if r.index == ev.rung), None)
        if rung is None:
            raise BookkeepingError(f"event log references unknown rung {ev.rung}")
        rung.results.append((ev.trial_id, ev.valid_rmse))
        if ev.decision == "complete":
            continue
        expected = asha_decide(rungs, (ev.trial_id, ev.rung, ev.valid_rmse), eta)
        if expected != ev.decision:
            return False
    return True


def _default_trial_runner(data: SequenceData, base_spec: ModelSpec, base_config: TrainConfig):
    """Train from scratch for the rung's epoch budget; returns best valid RMSE."""

    def run(config_overlay: dict, epochs: int, trial_seed: int) -> float:
        spec = replace(
            base_spec,
            hidden=config_overlay.get("hidden", base_spec.hidden),
            depth=config_overlay.get("depth", base_spec.depth),
            residual=config_overlay.get("residual", base_spec.residual),
        )
        config = replace(
            base_config,
            lr_max=config_overlay.get("lr", base_config.lr_max),
            weight_decay=config_overlay.get("weight_decay", base_config.weight_decay),
            chunk_len=config_overlay.get("chunk_len", base_config.chunk_len),
            max_epochs=epochs,
            seed=trial_seed,
        )
        if config.window_len % config.chunk_len != 0 or config.window_len < config.chunk_len:
            config = replace(config, window_len=config.chunk_len * max(
                1, base_config.window_len // config.chunk_len))
        model = Model.create(spec, trial_seed)
        result = fit(model, data, config)
        return result.best_valid_rmse

    return run


def run_search(
    space: SearchSpace,
    budget: int,
    workers: int,
    data: SequenceData | None,
    *,
    base_spec: ModelSpec | None = None,
    base_config: TrainConfig | None = None,
    eta: int = 3,
    r_min: int = 2,
    num_rungs: int = 3,
    seed: int = 0,
    out_path: str | Path | None = None,
    trial_runner: Callable[[dict, int, int], float] | None = None,
    include_default: bool = True,
) -> tuple[list[TrialRecord], list[SearchEvent]]:
    """Run ASHA until `budget` trials have been sampled and all work drained.

    Workers pull either a pending promotion or a freshly sampled config.
    Trial failures are recorded and skipped; the search continues. Returns
    the records sorted by best achieved validation RMSE plus the event log.
    """
    if budget < 1 or workers < 1:
        raise ParameterError("budget and workers must be >= 1")
    if eta < 2:
        raise ParameterError("eta must be >= 2")
    if trial_runner is None:
        if data is None or base_spec is None or base_config is None:
            raise ParameterError("run_search needs data, base_spec and base_config "
                                 "unless a trial_runner is injected")
        trial_runner = _default_trial_runner(data, base_spec, base_config)
    rungs = [Rung(r, r_min * eta ** r) for r in range(num_rungs)]
    records: dict[int, TrialRecord] = {}
    events: list[SearchEvent] = []
    pending: list[tuple[int, int]] = []  # (trial_id, rung_index) promotions to run
    lock = threading.Lock()
    cond = threading.Condition(lock)
    sampled = 0
    in_flight = 0
    log_fh = open(out_path, "a", encoding="utf-8") if out_path is not None else None

    def emit(trial_id: int, rung_index: int, loss: float, decision: str) -> None:
        ev = SearchEvent(trial_id, rung_index, rungs[rung_index].resource, loss,
                         decision, time.time())
        events.append(ev)
        if log_fh is not None:
            log_fh.write(ev.to_json() + "\n")
            log_fh.flush()

    def next_job():
        nonlocal sampled, in_flight
        with cond:
            while True:
                if pending:
                    job = pending.pop(0)
                    in_flight += 1
                    return job
                if sampled < budget:
                    trial_id = sampled
                    sampled += 1
                    if trial_id == 0 and include_default:
                        overlay = space.default_overlay()
                    else:
                        overlay = sample_config(space, seed, trial_id)
                    records[trial_id] = TrialRecord(trial_id=trial_id, config=overlay)
                    in_flight += 1
                    return (trial_id, 0)
                if in_flight == 0:
                    return None
                cond.wait()

    def complete(trial_id: int, rung_index: int, loss: float | None, failed: bool) -> None:
        nonlocal in_flight
        with cond:
            record = records[trial_id]
            if failed:
                record.status = "failed"
                emit(trial_id, rung_index, math.nan, "fail")
            else:
                rungs[rung_index].results.append((trial_id, loss))
                record.rungs.append((rungs[rung_index].resource, loss))
                if rung_index == num_rungs - 1:
                    record.status = "completed"
                    emit(trial_id, rung_index, loss, "complete")
                else:
                    decision = asha_decide(rungs, (trial_id, rung_index, loss), eta)
                    if decision == "promote":
                        record.status = "promoted"
                        pending.append((trial_id, rung_index + 1))
                    else:
                        record.status = "stopped"
                    emit(trial_id, rung_index, loss, decision)
            in_flight -= 1
            cond.notify_all()

    def worker() -> None:
        while True:
            job = next_job()
            if job is None:
                return
            trial_id, rung_index = job
            overlay = records[trial_id].config
            try:
                loss = trial_runner(overlay, rungs[rung_index].resource,
                                    _trial_seed(seed, trial_id))
                complete(trial_id, rung_index, float(loss), failed=False)
            except SidnnError:
                complete(trial_id, rung_index, None, failed=True)

    try:
        if workers == 1:
            worker()
        else:
            threads = [threading.Thread(target=worker) for _ in range(workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
    finally:
        if log_fh is not None:
            log_fh.close()
    ranked = sorted(records.values(), key=lambda r: (r.best_loss, r.trial_id))
    return ranked, events


def _trial_seed(seed: int, trial_id: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(trial_id,)).generate_state(1)[0])
