"""Ground-truth trajectories for networked ODEs, and CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError, DimensionError, IntegrationBlowupError
from .graph import Graph, laplacian

DEFAULT_DT = 1e-3


@dataclass
class Trajectory:
    """Node states on a uniform time grid; row k is the state at ``t0 + k*dt``."""

    graph: Graph
    dt: float
    states: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 2:
            raise DataValidationError(f"trajectory needs a [T>=2, |V|] state matrix, got {self.states.shape}")
        if self.states.shape[1] != self.graph.node_count:
            raise DimensionError(
                f"trajectory has {self.states.shape[1]} columns but graph has {self.graph.node_count} nodes")
        if not self.dt > 0:
            raise DataValidationError("dt must be positive")
        if not np.all(np.isfinite(self.states)):
            raise DataValidationError("trajectory contains non-finite states")

    @property
    def num_rows(self) -> int:
        return self.states.shape[0]

    @property
    def last_index(self) -> int:
        return self.states.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.last_index * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.num_rows)

    def restrict(self, nodes: Sequence[int], subgraph: Graph) -> Trajectory:
        """Columns ``nodes`` (sorted) re-attached to ``subgraph``."""
        return Trajectory(subgraph, self.dt, self.states[:, sorted(nodes)].copy(), self.t0)


@dataclass
class SystemSpec:
    kind: str = "heat"
    diffusivity: float = 1.0
    coupling: float = 1.0
    omega: Sequence[float] | None = None
    ic_low: float | Sequence[float] = -1.0
    ic_high: float | Sequence[float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("heat", "kuramoto"):
            raise ConfigError(f"unknown system kind {self.kind!r}")
        if self.kind == "heat" and not self.diffusivity > 0:
            raise ConfigError("diffusivity must be strictly positive")
        if self.kind == "kuramoto" and not self.coupling > 0:
            raise ConfigError("coupling must be strictly positive")

    def validate_for(self, g: Graph) -> None:
        if self.kind == "kuramoto":
            if self.omega is None or len(self.omega) != g.node_count:
                raise ConfigError("kuramoto needs one natural frequency per node")
        for bound in (self.ic_low, self.ic_high):
            if np.ndim(bound) and len(bound) != g.node_count:
                raise ConfigError("per-node initial-condition bounds must match node_count")

    def rhs(self, g: Graph) -> Callable[[np.ndarray], np.ndarray]:
        self.validate_for(g)
        if self.kind == "heat":
            L = laplacian(g)
            k = self.diffusivity
            return lambda x: -k * (L @ x)
        omega = np.asarray(self.omega, dtype=np.float64)
        return lambda th: kuramoto_rhs(g, th, omega, self.coupling)


def heat_rhs(g: Graph, x, k: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.node_count,):
        raise DimensionError(f"state shape {x.shape} != ({g.node_count},)")
    return -k * (laplacian(g) @ x)


def kuramoto_rhs(g: Graph, theta, omega, K: float) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    n = g.node_count
    if theta.shape != (n,) or omega.shape != (n,):
        raise DimensionError(f"theta {theta.shape} / omega {omega.shape} must both be ({n},)")
    A = g.adjacency()
    deg = A.sum(axis=1)
    coupling = (A * np.sin(theta[None, :] - theta[:, None])).sum(axis=1)
    coupling = np.divide(coupling, deg, out=np.zeros(n), where=deg > 0)
    return omega + K * coupling


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ConfigError("dt must be positive")
    x = np.asarray(x, dtype=np.float64)
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowupError("RK4 step produced non-finite state")
    return out


def integrate(rhs, x0, steps: int, dt: float) -> np.ndarray:
    """``steps`` RK4 steps from ``x0``; returns the ``steps + 1`` visited states."""
    out = np.empty((steps + 1, len(x0)))
    out[0] = x0
    x = np.asarray(x0, dtype=np.float64)
    for k in range(steps):
        try:
            x = rk4_step(rhs, x, dt)
        except IntegrationBlowupError:
            raise IntegrationBlowupError(f"integration blew up at step {k + 1}") from None
        out[k + 1] = x
    return out


def initial_condition(spec: SystemSpec, g: Graph, rng: np.random.Generator) -> np.ndarray:
    lo = np.broadcast_to(np.asarray(spec.ic_low, dtype=np.float64), (g.node_count,))
    hi = np.broadcast_to(np.asarray(spec.ic_high, dtype=np.float64), (g.node_count,))
    return rng.uniform(lo, hi)


def simulate(spec: SystemSpec, g: Graph, steps: int, dt: float = DEFAULT_DT,
             x0=None) -> Trajectory:
    """Integrate ``steps`` RK4 steps from a seeded random (or given) initial state.

    The result has ``steps + 1`` rows and spans ``[0, steps * dt]``.
    """
    if steps < 1:
        raise ConfigError("need at least one integration step")
    rhs = spec.rhs(g)
    if x0 is None:
        x0 = initial_condition(spec, g, np.random.default_rng(spec.seed))
    return Trajectory(g, dt, integrate(rhs, np.asarray(x0, dtype=np.float64), steps, dt))


def simulate_many(spec: SystemSpec, g: Graph, count: int, steps: int,
                  dt: float = DEFAULT_DT) -> list[Trajectory]:
    """``count`` trajectories; trajectory i uses seed ``spec.seed + i``."""
    out = []
    for i in range(count):
        s = SystemSpec(spec.kind, spec.diffusivity, spec.coupling, spec.omega,
                       spec.ic_low, spec.ic_high, spec.seed + i)
        out.append(simulate(s, g, steps, dt))
    return out


def heat_exact(g: Graph, x0, k: float, times) -> np.ndarray:
    """Closed-form ``exp(-k L t) x0`` via the symmetric eigendecomposition of L."""
    lam, U = np.linalg.eigh(laplacian(g))
    c = U.T @ np.asarray(x0, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    return (np.exp(-k * np.outer(times, lam)) * c) @ U.T


def load_trajectory_csv(path, g: Graph, dt: float, header: bool = False,
                        columns: Sequence[int] | None = None) -> Trajectory:
    """Read one row per time step, one column per node.

    ``columns`` selects a subset of file columns (for observing a subgraph of
    a larger recording); the selection must match ``g.node_count``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                expect = g.node_count if columns is None else None
                if expect is not None and width != expect:
                    raise DataValidationError(
                        f"{path}:{lineno}: ragged row: {width} values for a {expect}-node graph")
            elif len(row) != width:
                raise DataValidationError(
                    f"{path}:{lineno}: ragged row: {len(row)} values, expected {width}")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataValidationError(
                        f"{path}: non-numeric cell {cell!r} at row {lineno}, column {col}") from None
                if not math.isfinite(v):
                    raise DataValidationError(
                        f"{path}: non-finite cell {cell!r} at row {lineno}, column {col}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataValidationError(f"{path}: no data rows")
    states = np.array(rows)
    if columns is not None:
        cols = list(columns)
        if len(cols) != g.node_count or max(cols) >= states.shape[1] or min(cols) < 0:
            raise DataValidationError(f"{path}: column selection {cols} invalid for this file/graph")
        states = states[:, cols]
    return Trajectory(g, dt, states)


def format_float(v: float) -> str:
    return repr(float(v))


def save_trajectory_csv(traj: Trajectory, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in traj.states:
            w.writerow([format_float(v) for v in row])
