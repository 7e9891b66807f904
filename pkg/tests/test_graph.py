import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepgraphonet.errors import DimensionError, GraphError, SubgraphNotConnectedError
from deepgraphonet.graph import (Graph, induced_subgraph, is_connected, laplacian, load_graph,
                                 neighbor_mean, path_graph, random_connected_graph, save_graph)
from deepgraphonet.tensorcore import Tensor, tsum

TRIANGLE = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def test_neighbor_mean_path():
    out = neighbor_mean(path_graph(3), np.array([[2.0], [4.0], [6.0]]))
    np.testing.assert_array_equal(out, [[4.0], [4.0], [4.0]])


def test_neighbor_mean_isolated_node_is_zero():
    g = Graph(3, frozenset({(0, 1)}))
    out = neighbor_mean(g, np.array([[1.0], [2.0], [7.0]]))
    assert out[2, 0] == 0.0


def test_neighbor_mean_triangle():
    out = neighbor_mean(TRIANGLE, np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_allclose(out[:, 0], [2.5, 2.0, 1.5])


def test_neighbor_mean_row_mismatch():
    with pytest.raises(DimensionError):
        neighbor_mean(TRIANGLE, np.ones((4, 1)))


def test_neighbor_mean_differentiable():
    x = Tensor(np.arange(3.0).reshape(3, 1), requires_grad=True)
    tsum(neighbor_mean(path_graph(3), x)).backward()
    # column sums of the mean matrix: node0 feeds node1 with weight 1/2, etc.
    np.testing.assert_allclose(x.grad[:, 0], [0.5, 2.0, 0.5])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), extra=st.integers(0, 6), seed=st.integers(0, 999), d=st.integers(1, 3))
def test_neighbor_mean_permutation_equivariant(n, extra, seed, d):
    g = random_connected_graph(n, extra, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    perm = rng.permutation(n)
    out = neighbor_mean(g, x)
    out_p = neighbor_mean(g.permuted(perm), x[perm])
    np.testing.assert_allclose(out_p, out[perm], atol=1e-14)


def test_is_connected():
    assert is_connected(Graph(1))
    assert not is_connected(Graph(2))
    assert is_connected(path_graph(6))


def test_induced_subgraph_examples():
    full = induced_subgraph(TRIANGLE, [2, 0, 1])
    assert full.edges == TRIANGLE.edges
    edge = induced_subgraph(TRIANGLE, [0, 1])
    assert edge.node_count == 2 and edge.edges == {(0, 1)}
    with pytest.raises(SubgraphNotConnectedError, match="subgraph not connected"):
        induced_subgraph(path_graph(4), [0, 2])


def test_induced_subgraph_errors():
    with pytest.raises(GraphError):
        induced_subgraph(TRIANGLE, [0, 5])
    with pytest.raises(GraphError):
        induced_subgraph(TRIANGLE, [0, 0])


def test_induced_subgraph_idempotent_on_full_set():
    g = random_connected_graph(10, 5, 3)
    sub = induced_subgraph(g, [1, 2, 3, 4, 5, 6, 7, 8, 9, 0])
    again = induced_subgraph(sub, range(sub.node_count))
    assert again == sub


def test_laplacian_examples():
    L = laplacian(TRIANGLE)
    np.testing.assert_array_equal(L, [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])
    np.testing.assert_array_equal(laplacian(Graph(3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(laplacian(path_graph(3)), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 9), extra=st.integers(0, 8), seed=st.integers(0, 999))
def test_laplacian_properties(n, extra, seed):
    L = laplacian(random_connected_graph(n, extra, seed))
    np.testing.assert_array_equal(L, L.T)
    np.testing.assert_array_equal(L.sum(axis=1), 0)
    x = np.random.default_rng(seed).normal(size=n)
    assert x @ L @ x >= -1e-12


def test_graph_invariants_enforced():
    with pytest.raises(GraphError):
        Graph(2, frozenset({(0, 0)}))
    with pytest.raises(GraphError):
        Graph(2, frozenset({(0, 2)}))
    with pytest.raises(GraphError):
        Graph.from_edges(3, [(0, 1), (1, 0)])


def test_random_connected_graph(tmp_path):
    for seed in range(20):
        g = random_connected_graph(7, 2, seed)
        assert is_connected(g)
        assert len(g.edges) == 6 + 2


def test_graph_json_round_trip(tmp_path):
    g = Graph.from_edges(3, [(0, 1), (1, 2)], labels=["a", "b", "c"])
    p = tmp_path / "g.json"
    save_graph(g, p)
    assert load_graph(p) == g
    p.write_text(json.dumps({"nodes": 4, "edges": [[0, 1], [2, 3]]}))
    assert load_graph(p).node_count == 4


def test_graph_json_rejects_bad_input(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"nodes": 3, "edges": [[0, 1, 2]]}))
    with pytest.raises(GraphError):
        load_graph(p)
    p.write_text(json.dumps({"nodes": 3, "edges": [], "weights": []}))
    with pytest.raises(GraphError):
        load_graph(p)


def test_checksum_changes_with_edges():
    a = path_graph(4)
    b = Graph.from_edges(4, [(0, 1), (1, 2), (0, 3)])
    assert a.checksum() != b.checksum()
    assert a.checksum() == path_graph(4).checksum()
