"""Error metrics, complete-trajectory rollouts, zero-shot transfer and sweeps."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dynamics import Trajectory, format_float
from .errors import (ConfigError, DGONError, DimensionError, DivergenceError,
                     InsufficientHistoryError, SubgraphNotConnectedError, UndefinedMetricError)
from .graph import Graph, is_connected
from .sampling import (MemoryWindow, fixed_lags, mode_for_variant, random_lags, to_steps,
                       window_from_states)

log = logging.getLogger(__name__)


def l1_relative_error(pred, truth) -> float:
    """``100 * sum|pred - truth| / sum|truth|`` in percent."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"pred {pred.shape} vs truth {truth.shape}")
    denom = np.abs(truth).sum()
    if denom == 0:
        raise UndefinedMetricError("L1 relative error undefined for an all-zero reference")
    return float(100.0 * np.abs(pred - truth).sum() / denom)


class OraclePredictor:
    """Returns the recorded future exactly; used to check rollout bookkeeping.

    Given several trajectories, the one whose states reproduce the window
    at its anchor is used.
    """

    def __init__(self, trajs):
        self.trajs = [trajs] if isinstance(trajs, Trajectory) else list(trajs)

    def _source(self, window: MemoryWindow) -> Trajectory:
        a = window.anchor_index
        for tr in self.trajs:
            if a <= tr.last_index and np.array_equal(tr.states[a - window.lags].T, window.values):
                return tr
        raise ConfigError("oracle has no trajectory matching this window")

    def predict(self, g: Graph, window: MemoryWindow, h_values) -> np.ndarray:
        tr = self._source(window)
        lags = np.rint(np.asarray(h_values) / tr.dt).astype(np.int64)
        return tr.states[window.anchor_index + lags].copy()


@dataclass
class RolloutResult:
    """Predicted states at ``times``; horizon k starts at grid index ``anchors[k]``."""

    times: np.ndarray
    pred: np.ndarray
    truth: np.ndarray | None
    anchors: list
    windows_built: int

    @property
    def n_horizons(self) -> int:
        return len(self.anchors)

    def error(self) -> float:
        return l1_relative_error(self.pred, self.truth)


def _lags_for(steps_M: int, m: int, mode: str, rng: np.random.Generator) -> np.ndarray:
    return fixed_lags(steps_M, m) if mode == "fixed" else random_lags(steps_M, m, rng)


def rollout_teacher_forced(model, g: Graph, traj: Trajectory, t_M: float, m: int, h: float,
                           mode: str = "fixed", seed: int = 0) -> RolloutResult:
    """Predict horizon after horizon, refreshing the memory from observed data.

    Horizon n anchors at ``t = t_M + n*h``; all grid queries in ``(t, t+h]``
    share the one window built at ``t``. The last horizon is cut at the end
    of the trajectory, so predictions tile ``(t_M, L]`` exactly.
    """
    dt = traj.dt
    steps_M = to_steps(t_M, dt, "t_M")
    steps_h = to_steps(h, dt, "h")
    last = traj.last_index
    if steps_h < 1 or last < steps_M + steps_h:
        raise InsufficientHistoryError(
            f"trajectory of length {traj.duration} shorter than t_M + h = {t_M + h}")
    n_hor = math.ceil((last - steps_M) / steps_h)
    preds, idx, anchors = [], [], []
    for n in range(n_hor):
        a = steps_M + n * steps_h
        lags = _lags_for(steps_M, m, mode, np.random.default_rng([seed, n]))
        window = window_from_states(traj.states, a, lags, t_M, dt)
        q = np.arange(1, min(steps_h, last - a) + 1)
        preds.append(np.asarray(model.predict(g, window, q * dt)))
        idx.append(a + q)
        anchors.append(a)
    idx = np.concatenate(idx)
    return RolloutResult(traj.t0 + idx * dt, np.concatenate(preds), traj.states[idx].copy(),
                         anchors, len(anchors))


def rollout_autoregressive(model, g: Graph, history, n_horizons: int, t_M: float, m: int,
                           h: float, dt: float, mode: str = "fixed", seed: int = 0,
                           max_steps: int | None = None, t0: float = 0.0,
                           truth: Trajectory | None = None) -> RolloutResult:
    """Feed the model its own predictions as memory after the initial window.

    ``history`` holds the observed states up to the start time (at least
    ``t_M/dt + 1`` rows). ``max_steps`` caps the total number of predicted
    steps (truncating the final horizon).
    """
    steps_M = to_steps(t_M, dt, "t_M")
    steps_h = to_steps(h, dt, "h")
    buf = [np.asarray(r, dtype=np.float64) for r in np.asarray(history, dtype=np.float64)]
    if len(buf) < steps_M + 1:
        raise InsufficientHistoryError(f"initial history has {len(buf)} rows, need {steps_M + 1}")
    if n_horizons < 1:
        raise ConfigError("n_horizons must be >= 1")
    start = len(buf) - 1
    budget = n_horizons * steps_h if max_steps is None else min(max_steps, n_horizons * steps_h)
    preds, idx, anchors = [], [], []
    for n in range(n_horizons):
        a = start + n * steps_h
        done = a - start
        if done >= budget:
            break
        lags = _lags_for(steps_M, m, mode, np.random.default_rng([seed, n]))
        states = np.array(buf[a - steps_M:a + 1])
        window = window_from_states(states, steps_M, lags, t_M, dt)
        window.anchor_index = a
        q = np.arange(1, min(steps_h, budget - done) + 1)
        p = np.asarray(model.predict(g, window, q * dt))
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"non-finite prediction in horizon {n}")
        buf.extend(p)
        preds.append(p)
        idx.append(a + q)
        anchors.append(a)
    idx = np.concatenate(idx)
    tr = truth.states[idx].copy() if truth is not None else None
    return RolloutResult(t0 + idx * dt, np.concatenate(preds), tr, anchors, len(anchors))


@dataclass
class EvalReport:
    pooled_error: float
    mean_error: float
    std_error: float
    per_node_error: list
    trajectory_errors: list
    n_samples: int
    config: dict
    graph_id: str | None = None
    rollouts: list = field(default_factory=list, repr=False)
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pooled_error": self.pooled_error,
            "mean_error": self.mean_error,
            "std_error": self.std_error,
            "per_node_error": self.per_node_error,
            "trajectory_errors": self.trajectory_errors,
            "n_samples": self.n_samples,
            "graph_id": self.graph_id,
            "config": self.config,
            "timing": self.timing,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate(model, g: Graph, trajs: Sequence[Trajectory], t_M: float, m: int, h: float,
             mode: str | None = None, seed: int = 0, autoregressive: bool = False,
             graph_id: str | None = None, config: dict | None = None) -> EvalReport:
    """Roll out every trajectory and aggregate L1 relative errors.

    ``pooled_error`` pools all test rollouts; ``mean_error``/``std_error``
    are over per-sample errors, one sample being one predicted time step
    (all nodes) -- samples whose reference is identically zero are skipped.
    """
    if not trajs:
        raise ConfigError("no trajectories to evaluate")
    if mode is None:
        mode = mode_for_variant(model.config.variant)
    t_start = time.perf_counter()
    results = []
    for i, tr in enumerate(trajs):
        if autoregressive:
            steps_M = to_steps(t_M, tr.dt, "t_M")
            steps_h = to_steps(h, tr.dt, "h")
            total = tr.last_index - steps_M
            if total < steps_h:
                raise InsufficientHistoryError("trajectory shorter than t_M + h")
            res = rollout_autoregressive(model, g, tr.states[:steps_M + 1], math.ceil(total / steps_h),
                                         t_M, m, h, tr.dt, mode, seed + i, max_steps=total,
                                         t0=tr.t0, truth=tr)
        else:
            res = rollout_teacher_forced(model, g, tr, t_M, m, h, mode, seed + i)
        results.append(res)
    pred = np.concatenate([r.pred for r in results])
    truth = np.concatenate([r.truth for r in results])
    num = np.abs(pred - truth).sum(axis=1)
    den = np.abs(truth).sum(axis=1)
    ok = den > 0
    per_sample = 100.0 * num[ok] / den[ok]
    per_node = [l1_relative_error(pred[:, j], truth[:, j]) if np.abs(truth[:, j]).sum() > 0
                else float("nan") for j in range(pred.shape[1])]
    echo = dict(config or {})
    echo.setdefault("t_M", t_M)
    echo.setdefault("m", m)
    echo.setdefault("h", h)
    echo.setdefault("variant", model.config.variant if hasattr(model, "config") else None)
    echo.setdefault("mode", mode)
    echo.setdefault("autoregressive", autoregressive)
    return EvalReport(
        pooled_error=l1_relative_error(pred, truth),
        mean_error=float(per_sample.mean()),
        std_error=float(per_sample.std()),
        per_node_error=per_node,
        trajectory_errors=[r.error() for r in results],
        n_samples=int(per_sample.size),
        config=echo,
        graph_id=graph_id,
        rollouts=results,
        timing={"seconds": time.perf_counter() - t_start},
    )


def zero_shot_eval(model, g_prime: Graph, trajs: Sequence[Trajectory], t_M: float, m: int,
                   h: float, seed: int = 0, graph_id: str | None = None,
                   train_graph_id: str | None = None, autoregressive: bool = False,
                   config: dict | None = None) -> EvalReport:
    """Evaluate unchanged weights on a graph they were not trained on."""
    if not is_connected(g_prime):
        raise SubgraphNotConnectedError()
    echo = dict(config or {})
    echo["train_graph_id"] = train_graph_id
    return evaluate(model, g_prime, trajs, t_M, m, h, seed=seed, autoregressive=autoregressive,
                    graph_id=graph_id, config=echo)


def write_rollout_csv(res: RolloutResult, pred_path, true_path=None, labels=None) -> None:
    n = res.pred.shape[1]
    names = [f"node_{j}" for j in range(n)] if labels is None else [str(x) for x in labels]
    pairs = [(pred_path, res.pred)]
    if true_path is not None and res.truth is not None:
        pairs.append((true_path, res.truth))
    for path, arr in pairs:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time"] + names)
            for t, row in zip(res.times, arr):
                w.writerow([format_float(t)] + [format_float(v) for v in row])


@dataclass
class SweepCell:
    t_M: float
    h: float
    variant: str
    status: str
    report: EvalReport | None = None
    message: str = ""


def sweep(run_cell: Callable[[float, float, str], EvalReport], t_M_values: Sequence[float],
          h_values: Sequence[float], variants: Sequence[str] = ("standard",)) -> list[SweepCell]:
    """Train/evaluate one model per (t_M, h, variant) cell; failures do not abort the sweep."""
    if not t_M_values or not h_values or not variants:
        raise ConfigError("sweep grid is empty")
    cells = []
    for variant in variants:
        for t_M in t_M_values:
            for h in h_values:
                try:
                    rep = run_cell(t_M, h, variant)
                    cells.append(SweepCell(t_M, h, variant, "ok", rep))
                except (DGONError, ValueError, ArithmeticError) as exc:
                    log.warning("sweep cell t_M=%s h=%s %s failed: %s", t_M, h, variant, exc)
                    log.debug("%s", traceback.format_exc())
                    cells.append(SweepCell(t_M, h, variant, "failed", None, str(exc)))
    return cells


SWEEP_COLUMNS = ["t_M", "h", "variant", "status", "mean_error", "std_error", "pooled_error", "message"]


def write_sweep_csv(cells: Sequence[SweepCell], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in cells:
            r = c.report
            w.writerow([format_float(c.t_M), format_float(c.h), c.variant, c.status,
                        format_float(r.mean_error) if r else "",
                        format_float(r.std_error) if r else "",
                        format_float(r.pooled_error) if r else "",
                        c.message])
