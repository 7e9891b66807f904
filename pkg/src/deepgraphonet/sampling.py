"""Memory windows and (window, query, target) triplets cut from trajectories.

Times are handled as integer step counts on the trajectory grid: a sensor
``lag`` of ``k`` means the state at ``t - k*dt``; a query lag of ``j`` means
``t + j*dt``. Seconds only appear at the API boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import Trajectory
from .errors import ConfigError, DataValidationError, InsufficientHistoryError

VARIANTS = ("standard", "resolution_independent")
MODES = ("fixed", "random")


def to_steps(duration: float, dt: float, what: str = "duration") -> int:
    """Convert seconds to a whole number of grid steps, refusing off-grid values."""
    k = duration / dt
    n = int(round(k))
    if abs(k - n) > 1e-6 * max(1.0, abs(k)):
        raise ConfigError(f"{what}={duration} is not an integer multiple of dt={dt}")
    if n < 0:
        raise ConfigError(f"{what} must be non-negative")
    return n


def mode_for_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return "fixed" if variant == "standard" else "random"


def sensor_count(m: int, variant: str) -> int:
    return m if variant == "standard" else m // 2


def feature_width(m: int, variant: str) -> int:
    return m if variant == "standard" else 2 * (m // 2)


@dataclass
class MemoryWindow:
    """Sensor readings ``x_S(t - tau_i)`` for one anchor time ``t``.

    ``lags`` are kept strictly decreasing (oldest sensor first); the
    constructor sorts lags and value columns together.
    """

    lags: np.ndarray
    values: np.ndarray
    t_M: float
    dt: float
    anchor_index: int | None = None

    def __post_init__(self):
        lags = np.asarray(self.lags, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if lags.ndim != 1 or lags.size < 1:
            raise DataValidationError("a window needs at least one sensor")
        if values.ndim != 2 or values.shape[1] != lags.size:
            raise DataValidationError(
                f"window values {values.shape} do not align with {lags.size} sensors")
        order = np.argsort(-lags, kind="stable")
        lags, values = lags[order], values[:, order]
        if np.any(np.diff(lags) >= 0):
            raise DataValidationError("sensor offsets must be distinct")
        steps_M = to_steps(self.t_M, self.dt, "t_M")
        if lags[-1] < 0 or lags[0] > steps_M:
            raise DataValidationError("sensor offsets must lie in [0, t_M]")
        self.lags, self.values = lags, values

    @property
    def offsets(self) -> np.ndarray:
        """tau_i in seconds, descending."""
        return self.lags * self.dt

    @property
    def num_sensors(self) -> int:
        return self.lags.size

    def features(self, variant: str) -> np.ndarray:
        """Per-node branch input: ``[n, m]`` values, or ``[n, 2s]`` interleaved (value, tau/t_M)."""
        if variant == "standard":
            return self.values
        if variant == "resolution_independent":
            n, s = self.values.shape
            out = np.empty((n, 2 * s))
            out[:, 0::2] = self.values
            out[:, 1::2] = self.offsets / self.t_M
            return out
        raise ConfigError(f"unknown variant {variant!r}")


def fixed_lags(steps_M: int, m: int) -> np.ndarray:
    """m lags evenly spread over [0, steps_M], both ends included, descending."""
    if m < 2:
        raise ConfigError("m must be at least 2")
    if m > steps_M + 1:
        raise ConfigError(f"m={m} exceeds the {steps_M + 1} grid points available in the memory")
    pos = np.rint(np.linspace(0, steps_M, m)).astype(np.int64)
    return steps_M - pos


def random_lags(steps_M: int, m: int, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """floor(m/2) distinct lags drawn from the fixed m-grid, always containing lag 0.

    With ``count`` given, returns ``[count, floor(m/2)]`` independent draws.
    """
    grid = fixed_lags(steps_M, m)
    k = m // 2
    others = grid[:-1]
    rows = 1 if count is None else count
    keys = rng.random((rows, others.size))
    picks = others[np.argsort(keys, axis=1)[:, : k - 1]]
    lags = np.concatenate([picks, np.zeros((rows, 1), dtype=np.int64)], axis=1)
    lags = -np.sort(-lags, axis=1)
    return lags[0] if count is None else lags


def _check_anchor(traj: Trajectory, anchor_index: int, steps_M: int) -> None:
    if anchor_index < steps_M:
        raise InsufficientHistoryError(
            f"anchor index {anchor_index} has less than t_M ({steps_M} steps) of history")
    if anchor_index > traj.last_index:
        raise InsufficientHistoryError(f"anchor index {anchor_index} beyond trajectory end")


def window_from_states(states: np.ndarray, anchor_index: int, lags: np.ndarray,
                       t_M: float, dt: float) -> MemoryWindow:
    return MemoryWindow(lags, states[anchor_index - lags].T, t_M, dt, anchor_index)


def fixed_window(traj: Trajectory, anchor_index: int, t_M: float, m: int) -> MemoryWindow:
    steps_M = to_steps(t_M, traj.dt, "t_M")
    _check_anchor(traj, anchor_index, steps_M)
    return window_from_states(traj.states, anchor_index, fixed_lags(steps_M, m), t_M, traj.dt)


def random_window(traj: Trajectory, anchor_index: int, t_M: float, m: int, seed) -> MemoryWindow:
    steps_M = to_steps(t_M, traj.dt, "t_M")
    _check_anchor(traj, anchor_index, steps_M)
    rng = np.random.default_rng(seed)
    return window_from_states(traj.states, anchor_index, random_lags(steps_M, m, rng), t_M, traj.dt)


@dataclass
class Triplet:
    window: MemoryWindow
    h_n: float
    target: np.ndarray


@dataclass
class TripletSet:
    """Column-wise triplet storage.

    Row k: sensor lags ``lags[k]`` and readings ``values[k]`` (``[n, s]``)
    taken at anchor ``anchor[k]`` of trajectory ``traj_index[k]``; query
    ``query_lag[k]`` steps ahead; target ``targets[k]``.
    """

    values: np.ndarray
    lags: np.ndarray
    query_lag: np.ndarray
    targets: np.ndarray
    traj_index: np.ndarray
    anchor: np.ndarray
    t_M: float
    h: float
    dt: float
    skipped: int = 0
    group: np.ndarray | None = None

    def __post_init__(self):
        if self.group is None:
            # Rows sharing a window (same trajectory, anchor and lags) form one group.
            N = self.targets.shape[0]
            new = np.ones(N, dtype=bool)
            if N > 1:
                new[1:] = ((self.traj_index[1:] != self.traj_index[:-1])
                           | (self.anchor[1:] != self.anchor[:-1])
                           | np.any(self.lags[1:] != self.lags[:-1], axis=1))
            self.group = np.cumsum(new) - 1

    def __len__(self) -> int:
        return self.targets.shape[0]

    def __getitem__(self, k: int) -> Triplet:
        w = MemoryWindow(self.lags[k], self.values[k], self.t_M, self.dt, int(self.anchor[k]))
        return Triplet(w, float(self.query_lag[k] * self.dt), self.targets[k])

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def h_n(self) -> np.ndarray:
        return self.query_lag * self.dt

    def features(self, variant: str) -> np.ndarray:
        """Stacked branch inputs ``[N, n, F]``."""
        if variant == "standard":
            return self.values
        N, n, s = self.values.shape
        out = np.empty((N, n, 2 * s))
        out[:, :, 0::2] = self.values
        out[:, :, 1::2] = (self.lags * self.dt / self.t_M)[:, None, :]
        return out

    def subset(self, idx) -> TripletSet:
        return TripletSet(self.values[idx], self.lags[idx], self.query_lag[idx], self.targets[idx],
                          self.traj_index[idx], self.anchor[idx], self.t_M, self.h, self.dt,
                          self.skipped, self.group[idx])

    @classmethod
    def concatenate(cls, parts: Sequence[TripletSet]) -> TripletSet:
        p0 = parts[0]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        groups, offset = [], 0
        for p in parts:
            groups.append(p.group + offset)
            offset += int(p.group.max()) + 1 if len(p) else 0
        return cls(cat("values"), cat("lags"), cat("query_lag"), cat("targets"), cat("traj_index"),
                   cat("anchor"), p0.t_M, p0.h, p0.dt, sum(p.skipped for p in parts),
                   np.concatenate(groups))

    def grouped_batch(self, idx, variant: str):
        """Unique windows of rows ``idx`` as ``(X[G, n, F], row_to_window[len(idx)])``."""
        uniq, first, inv = np.unique(self.group[idx], return_index=True, return_inverse=True)
        rows = np.asarray(idx)[first]
        return self.subset(rows).features(variant), inv


def anchor_indices(last_index: int, steps_M: int, steps_h: int, stride: int) -> np.ndarray:
    if last_index < steps_M + steps_h:
        return np.empty(0, dtype=np.int64)
    return np.arange(steps_M, last_index - steps_h + 1, stride, dtype=np.int64)


def build_triplets(trajs: Sequence[Trajectory], t_M: float, h: float, m: int,
                   queries_per_anchor: int = 4, anchor_stride: int | None = None,
                   mode: str = "fixed", seed: int = 0) -> TripletSet:
    """Cut every trajectory into triplets.

    Anchors start at ``t_M`` and advance by ``anchor_stride`` grid steps
    (default ``h/dt``). Each anchor gets ``queries_per_anchor`` queries: one
    at ``h_n = h`` plus draws from the grid points in ``[0, h)``. Trajectories
    shorter than ``t_M + h`` are skipped and counted in ``skipped``.
    """
    if not trajs:
        raise ConfigError("no trajectories given")
    if mode not in MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    if queries_per_anchor < 1:
        raise ConfigError("queries_per_anchor must be >= 1")
    dt = trajs[0].dt
    n = trajs[0].graph.node_count
    steps_M = to_steps(t_M, dt, "t_M")
    steps_h = to_steps(h, dt, "h")
    if steps_h < 1:
        raise ConfigError("h must span at least one grid step")
    stride = steps_h if anchor_stride is None else int(anchor_stride)
    if stride < 1:
        raise ConfigError("anchor_stride must be >= 1")
    grid = fixed_lags(steps_M, m)
    s = grid.size if mode == "fixed" else m // 2
    if s < 1:
        raise ConfigError("random sensors need m >= 2")
    rng = np.random.default_rng(seed)

    parts_v, parts_l, parts_q, parts_y, parts_t, parts_a = [], [], [], [], [], []
    skipped = 0
    for ti, tr in enumerate(trajs):
        if abs(tr.dt - dt) > 1e-12 * dt or tr.graph.node_count != n:
            raise ConfigError("all trajectories must share dt and node count")
        A = anchor_indices(tr.last_index, steps_M, steps_h, stride)
        if A.size == 0:
            skipped += 1
            continue
        if mode == "fixed":
            lags = np.broadcast_to(grid, (A.size, s))
        else:
            lags = random_lags(steps_M, m, rng, count=A.size)
        vals = tr.states[A[:, None] - lags]  # [a, s, n]
        vals = np.transpose(vals, (0, 2, 1))
        q = np.empty((A.size, queries_per_anchor), dtype=np.int64)
        q[:, 0] = steps_h
        if queries_per_anchor > 1:
            extra = queries_per_anchor - 1
            if extra <= steps_h:
                keys = rng.random((A.size, steps_h))
                q[:, 1:] = np.argsort(keys, axis=1)[:, :extra]
            else:
                q[:, 1:] = rng.integers(0, steps_h, size=(A.size, extra))
        rep = np.repeat(np.arange(A.size), queries_per_anchor)
        ql = q.reshape(-1)
        parts_v.append(vals[rep])
        parts_l.append(np.ascontiguousarray(lags[rep]))
        parts_q.append(ql)
        parts_y.append(tr.states[A[rep] + ql])
        parts_t.append(np.full(rep.size, ti, dtype=np.int64))
        parts_a.append(A[rep])

    if not parts_v:
        empty = TripletSet(np.empty((0, n, s)), np.empty((0, s), dtype=np.int64),
                           np.empty(0, dtype=np.int64), np.empty((0, n)),
                           np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                           t_M, h, dt, skipped)
        return empty
    return TripletSet(np.concatenate(parts_v), np.concatenate(parts_l), np.concatenate(parts_q),
                      np.concatenate(parts_y), np.concatenate(parts_t), np.concatenate(parts_a),
                      t_M, h, dt, skipped)


@dataclass
class SamplingConfig:
    t_M: float = 0.05
    h: float = 0.02
    m: int = 51
    queries_per_anchor: int = 4
    anchor_stride: int | None = None
    mode: str = "fixed"
    seed: int = 0

    def build(self, trajs: Sequence[Trajectory], seed: int | None = None) -> TripletSet:
        return build_triplets(trajs, self.t_M, self.h, self.m, self.queries_per_anchor,
                              self.anchor_stride, self.mode, self.seed if seed is None else seed)


@dataclass
class DatasetSplit:
    train_trajs: list
    val_trajs: list
    test_trajs: list
    fractions: tuple
    seed: int
    indices: tuple = ()
    train: TripletSet | None = None
    val: TripletSet | None = None
    test: TripletSet | None = None
    sampling: SamplingConfig | None = None

    def with_triplets(self, sampling: SamplingConfig) -> DatasetSplit:
        # Distinct seeds per partition so random sensors differ across splits.
        self.sampling = sampling
        self.train = sampling.build(self.train_trajs, seed=sampling.seed)
        self.val = sampling.build(self.val_trajs, seed=sampling.seed + 1) if self.val_trajs else None
        self.test = sampling.build(self.test_trajs, seed=sampling.seed + 2) if self.test_trajs else None
        return self


def _check_fractions(fractions) -> tuple:
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    return fractions


def split_trajectories(trajs: Sequence[Trajectory], fractions=(0.6, 0.2, 0.2), seed: int = 0,
                       sampling: SamplingConfig | None = None) -> DatasetSplit:
    """Shuffle whole trajectories and partition them train/validation/test."""
    fractions = _check_fractions(fractions)
    N = len(trajs)
    if N < 3:
        raise ConfigError(f"need at least 3 trajectories to split, got {N}")
    perm = np.random.default_rng(seed).permutation(N)
    n_train = math.floor(fractions[0] * N + 1e-9)
    n_val = math.floor(fractions[1] * N + 1e-9)
    idx = (perm[:n_train].tolist(), perm[n_train:n_train + n_val].tolist(), perm[n_train + n_val:].tolist())
    split = DatasetSplit([trajs[i] for i in idx[0]], [trajs[i] for i in idx[1]],
                         [trajs[i] for i in idx[2]], fractions, seed, idx)
    return split.with_triplets(sampling) if sampling is not None else split


def split_by_time(traj: Trajectory, fractions=(0.6, 0.2, 0.2),
                  sampling: SamplingConfig | None = None) -> DatasetSplit:
    """Contiguous train/validation/test segments of one long recording."""
    fractions = _check_fractions(fractions)
    T = traj.num_rows
    b1 = math.floor(fractions[0] * T + 1e-9)
    b2 = b1 + math.floor(fractions[1] * T + 1e-9)
    segs = []
    for lo, hi in ((0, b1), (b1, b2), (b2, T)):
        if hi - lo < 2:
            raise ConfigError("trajectory too short for a time-based split")
        segs.append(Trajectory(traj.graph, traj.dt, traj.states[lo:hi], traj.t0 + lo * traj.dt))
    split = DatasetSplit([segs[0]], [segs[1]], [segs[2]], fractions, 0, ([0], [1], [2]))
    return split.with_triplets(sampling) if sampling is not None else split
