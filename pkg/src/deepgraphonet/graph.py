"""Undirected graphs, induced subgraphs and mean-neighbour aggregation."""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, GraphError, SubgraphNotConnectedError
from .tensorcore import Tensor, matmul


@dataclass(frozen=True)
class Graph:
    node_count: int
    edges: frozenset = field(default_factory=frozenset)
    labels: tuple | None = None

    def __post_init__(self):
        if self.node_count < 0:
            raise GraphError("node_count must be non-negative")
        canon = set()
        for e in self.edges:
            i, j = (int(v) for v in e)
            if i == j:
                raise GraphError(f"self-loop at node {i}")
            if not (0 <= i < self.node_count and 0 <= j < self.node_count):
                raise GraphError(f"edge ({i}, {j}) has an endpoint outside [0, {self.node_count})")
            canon.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(canon))
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != self.node_count:
                raise GraphError("label count does not match node_count")
            object.__setattr__(self, "labels", labels)

    @classmethod
    def from_edges(cls, node_count: int, edges, labels=None) -> Graph:
        edges = list(edges)
        seen = set()
        for i, j in edges:
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
        return cls(node_count, frozenset(seen), labels)

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.node_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.neighbors], dtype=np.float64)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.node_count, self.node_count))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    @cached_property
    def mean_matrix(self) -> np.ndarray:
        """Row-normalised adjacency; rows of isolated nodes are zero."""
        A = self.adjacency()
        deg = A.sum(axis=1, keepdims=True)
        M = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
        M.setflags(write=False)
        return M

    def permuted(self, perm: Sequence[int]) -> Graph:
        """Relabel so that old node ``perm[k]`` becomes new node ``k``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.node_count)):
            raise GraphError("not a permutation of the node set")
        inv = {old: new for new, old in enumerate(perm)}
        edges = frozenset((inv[i], inv[j]) for i, j in self.edges)
        labels = None if self.labels is None else tuple(self.labels[p] for p in perm)
        return Graph(self.node_count, edges, labels)

    def to_json(self) -> dict:
        nodes = list(self.labels) if self.labels is not None else self.node_count
        return {"nodes": nodes, "edges": [list(e) for e in self.sorted_edges()]}

    def checksum(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_graph(path) -> Graph:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or set(raw) - {"nodes", "edges"} or "nodes" not in raw:
        raise GraphError(f"{path}: expected an object with keys 'nodes' and 'edges'")
    nodes = raw["nodes"]
    if isinstance(nodes, int) and not isinstance(nodes, bool):
        count, labels = nodes, None
    elif isinstance(nodes, list):
        count, labels = len(nodes), nodes
    else:
        raise GraphError(f"{path}: 'nodes' must be a count or a label array")
    edges = raw.get("edges", [])
    if not all(isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)
               for e in edges):
        raise GraphError(f"{path}: every edge must be a two-element index array")
    return Graph.from_edges(count, [tuple(e) for e in edges], labels)


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(g.to_json()) + "\n")


def neighbor_mean(g: Graph, states):
    """Mean of neighbour rows for every node; differentiable when given a Tensor.

    ``states`` is ``[|V|, d]`` or batched ``[B, |V|, d]``.
    """
    arr = states.data if isinstance(states, Tensor) else np.asarray(states, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-2] != g.node_count:
        raise DimensionError(
            f"neighbor_mean: states shape {arr.shape} does not match node_count {g.node_count}")
    if isinstance(states, Tensor):
        return matmul(Tensor(g.mean_matrix), states)
    return g.mean_matrix @ arr


def is_connected(g: Graph) -> bool:
    if g.node_count == 0:
        raise GraphError("is_connected needs at least one node")
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in g.neighbors[i]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == g.node_count


def induced_subgraph(g: Graph, nodes: Sequence[int]) -> Graph:
    nodes = [int(v) for v in nodes]
    if len(set(nodes)) != len(nodes):
        raise GraphError("subgraph node indices must be unique")
    for v in nodes:
        if not 0 <= v < g.node_count:
            raise GraphError(f"subgraph node {v} out of range [0, {g.node_count})")
    nodes = sorted(nodes)
    if not nodes:
        raise GraphError("subgraph must contain at least one node")
    index = {v: k for k, v in enumerate(nodes)}
    edges = frozenset((index[i], index[j]) for i, j in g.edges if i in index and j in index)
    labels = None if g.labels is None else tuple(g.labels[v] for v in nodes)
    sub = Graph(len(nodes), edges, labels)
    if not is_connected(sub):
        raise SubgraphNotConnectedError()
    return sub


def laplacian(g: Graph) -> np.ndarray:
    A = g.adjacency()
    return np.diag(A.sum(axis=1)) - A


def path_graph(n: int) -> Graph:
    return Graph(n, frozenset((i, i + 1) for i in range(n - 1)))


def random_connected_graph(n: int, extra_edges: int, seed: int) -> Graph:
    """Random spanning tree plus ``extra_edges`` distinct chords."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        parent = order[rng.integers(0, k)]
        i, j = int(order[k]), int(parent)
        edges.add((min(i, j), max(i, j)))
    candidates = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in edges]
    take = min(extra_edges, len(candidates))
    for idx in rng.choice(len(candidates), size=take, replace=False) if take else []:
        edges.add(candidates[int(idx)])
    return Graph(n, frozenset(edges))
