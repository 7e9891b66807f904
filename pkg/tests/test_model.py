import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepgraphonet.errors import (CompatibilityError, ConfigError, CorruptFileError,
                                  DimensionError, DomainError, VersionMismatchError)
from deepgraphonet.graph import Graph, neighbor_mean, path_graph, random_connected_graph
from deepgraphonet.model import (DeepGraphONet, ModelConfig, load_params, merge, mp_layer,
                                 save_params)
from deepgraphonet.sampling import MemoryWindow
from deepgraphonet.tensorcore import tsum

SMALL = ModelConfig(n_gnn_layers=2, gnn_hidden_width=5, n_trunk_layers=2, trunk_hidden_width=4,
                    latent_dim=3, m=5, t_M=0.004, h=0.002)


def _window(n, cfg, seed=0):
    rng = np.random.default_rng(seed)
    steps_M = round(cfg.t_M / 1e-3)
    lags = np.arange(steps_M, -1, -1)[: cfg.sensors] if cfg.variant == "standard" else \
        np.sort(rng.choice(np.arange(1, steps_M + 1), cfg.sensors - 1, replace=False))[::-1].tolist() + [0]
    return MemoryWindow(lags, rng.normal(size=(n, cfg.sensors)), cfg.t_M, 1e-3)


def test_mp_layer_identity():
    H = np.random.default_rng(0).normal(size=(3, 2))
    out = mp_layer(np.eye(2), np.zeros((2, 2)), np.zeros(2), path_graph(3), H, "identity")
    np.testing.assert_array_equal(out.data, H)


def test_mp_layer_neighbor_means():
    g = random_connected_graph(5, 2, 1)
    H = np.random.default_rng(1).normal(size=(5, 3))
    out = mp_layer(np.zeros((3, 3)), np.eye(3), np.zeros(3), g, H, "identity")
    np.testing.assert_allclose(out.data, neighbor_mean(g, H), atol=1e-15)


def test_mp_layer_matches_scalar_loop():
    rng = np.random.default_rng(2)
    g = path_graph(3)
    W1, W2, b = rng.normal(size=(2, 3)) * 0.3, rng.normal(size=(2, 3)) * 0.3, rng.normal(size=2) * 0.3
    H = rng.normal(size=(3, 3))
    out = mp_layer(W1, W2, b, g, H, "tanh").data
    for i in range(3):
        nb = g.neighbors[i]
        for o in range(2):
            s = b[o]
            for k in range(3):
                s += W1[o, k] * H[i, k] + W2[o, k] * sum(H[j, k] for j in nb) / len(nb)
            assert out[i, o] == pytest.approx(math.tanh(s), abs=1e-12)


def test_mp_layer_width_mismatch():
    with pytest.raises(DimensionError):
        mp_layer(np.eye(2), np.eye(2), np.zeros(2), path_graph(3), np.ones((3, 3)))


def test_branch_shape_and_graph_size_independence():
    model = DeepGraphONet(SMALL, seed=1)
    for n in (6, 34):
        g = random_connected_graph(n, 3, n)
        b = model.branch(g, _window(n, SMALL).features("standard"))
        assert b.shape == (n, SMALL.latent_dim)
        assert model.forward(g, _window(n, SMALL), 0.001).shape == (n,)


def test_branch_rejects_wrong_layout():
    model = DeepGraphONet(SMALL)
    g = path_graph(3)
    with pytest.raises(CompatibilityError):
        model.branch(g, np.ones((3, 4)))
    bad = MemoryWindow([2, 1, 0], np.ones((3, 3)), SMALL.t_M, 1e-3)
    with pytest.raises(CompatibilityError):
        model.forward(g, bad, 0.001)
    with pytest.raises(DimensionError):
        model.branch(Graph(0), np.ones((0, 5)))


def test_trunk_shape_domain_determinism():
    model = DeepGraphONet(SMALL, seed=3)
    phi = model.trunk(0.001)
    assert phi.shape == (SMALL.latent_dim,)
    np.testing.assert_array_equal(phi.data, model.trunk(0.001).data)
    with pytest.raises(DomainError):
        model.trunk(0.0021)
    with pytest.raises(DomainError):
        model.trunk(-1e-4)
    assert model.trunk(0.004, allow_extrapolation=True).shape == (SMALL.latent_dim,)


def test_trunk_matches_scalar_loop_at_half_horizon():
    model = DeepGraphONet(SMALL, seed=4)
    s = model.store
    W0, b0 = s["trunk.0.W"].data, s["trunk.0.b"].data
    W1, b1 = s["trunk.1.W"].data, s["trunk.1.b"].data
    x = 0.5  # h_n / h
    hidden = [math.tanh(W0[k, 0] * x + b0[k]) for k in range(W0.shape[0])]
    expect = [math.tanh(sum(W1[o, k] * hidden[k] for k in range(len(hidden))) + b1[o])
              for o in range(W1.shape[0])]
    np.testing.assert_allclose(model.trunk(SMALL.h / 2).data, expect, atol=1e-12)


def test_merge_examples():
    assert merge(np.array([[1.0, 2.0]]), np.array([3.0, 4.0])).data.tolist() == [11.0]
    b = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(merge(b, np.zeros(3)).data, np.zeros(4))
    phi = np.array([0.3, -0.7, 1.1])
    for k in range(3):
        E = np.zeros((4, 3))
        E[:, k] = 1.0
        np.testing.assert_array_equal(merge(E, phi).data, np.full(4, phi[k]))
    with pytest.raises(DimensionError):
        merge(np.ones((2, 3)), np.ones(2))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 9), seed=st.integers(0, 999),
       variant=st.sampled_from(["standard", "resolution_independent"]))
def test_forward_permutation_equivariant(n, seed, variant):
    cfg = ModelConfig(n_gnn_layers=3, gnn_hidden_width=6, n_trunk_layers=2, trunk_hidden_width=5,
                      latent_dim=4, m=5, t_M=0.004, h=0.002, variant=variant)
    model = DeepGraphONet(cfg, seed=seed)
    g = random_connected_graph(n, 2, seed)
    w = _window(n, cfg, seed)
    perm = np.random.default_rng(seed).permutation(n)
    wp = MemoryWindow(w.lags, w.values[perm], w.t_M, w.dt)
    out = model.forward(g, w, 0.0015).data
    out_p = model.forward(g.permuted(perm), wp, 0.0015).data
    np.testing.assert_allclose(out_p, out[perm], rtol=0, atol=1e-12)


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_branch_locality_on_path(layers):
    cfg = ModelConfig(n_gnn_layers=layers, gnn_hidden_width=6, n_trunk_layers=1, latent_dim=4,
                      m=5, t_M=0.004, h=0.002)
    model = DeepGraphONet(cfg, seed=7)
    n, j = 9, 0
    g = path_graph(n)
    X = np.random.default_rng(0).normal(size=(n, 5))
    Xp = X.copy()
    Xp[j] += 0.5
    delta = np.abs(model.branch(g, Xp).data - model.branch(g, X).data).max(axis=1)
    for i in range(n):
        if abs(i - j) > layers:
            assert delta[i] == 0.0
        else:
            assert delta[i] > 0.0


def test_forward_gradient_matches_finite_differences():
    model = DeepGraphONet(SMALL, seed=5)
    g = random_connected_graph(4, 1, 2)
    w = _window(4, SMALL, 1)
    weights = np.random.default_rng(9).normal(size=4)

    def scalar():
        return float(model.forward(g, w, 0.0013).data @ weights)

    from deepgraphonet.tensorcore import mul
    tsum(mul(model.forward(g, w, 0.0013), weights)).backward()
    for name, t in model.store.items():
        fd = np.zeros_like(t.data)
        for i in np.ndindex(t.shape):
            old = t.data[i]
            t.data[i] = old + 1e-5
            fp = scalar()
            t.data[i] = old - 1e-5
            fm = scalar()
            t.data[i] = old
            fd[i] = (fp - fm) / 2e-5
        np.testing.assert_allclose(t.grad, fd, rtol=1e-4, atol=1e-9, err_msg=name)


def test_resolution_independent_sensor_order_invariance():
    cfg = ModelConfig(n_gnn_layers=2, gnn_hidden_width=5, n_trunk_layers=2, latent_dim=3,
                      m=9, t_M=0.008, h=0.002, variant="resolution_independent")
    model = DeepGraphONet(cfg, seed=2)
    lags = np.array([7, 5, 2, 0])
    vals = np.random.default_rng(3).normal(size=(3, 4))
    order = [2, 0, 3, 1]
    a = MemoryWindow(lags, vals, cfg.t_M, 1e-3)
    b = MemoryWindow(lags[order], vals[:, order], cfg.t_M, 1e-3)
    np.testing.assert_array_equal(b.lags, a.lags)
    g = path_graph(3)
    np.testing.assert_array_equal(model.forward(g, a, 0.001).data, model.forward(g, b, 0.001).data)


def test_predict_matches_forward():
    model = DeepGraphONet(SMALL, seed=8)
    g = path_graph(4)
    w = _window(4, SMALL)
    P = model.predict(g, w, [0.0005, 0.002])
    np.testing.assert_allclose(P[1], model.forward(g, w, 0.002).data, atol=1e-14)


def test_weight_file_round_trip(tmp_path):
    model = DeepGraphONet(SMALL, seed=11)
    p = tmp_path / "w.dgon"
    save_params(model, p)
    back = load_params(p)
    assert back.config == model.config
    for name, t in model.store.items():
        assert back.store[name].data.tobytes() == t.data.tobytes()
    raw = p.read_bytes()
    assert raw[:4] == b"DGON"


def test_weight_file_corruption(tmp_path):
    model = DeepGraphONet(SMALL, seed=11)
    p = tmp_path / "w.dgon"
    save_params(model, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-20])
    with pytest.raises(CorruptFileError):
        load_params(p)
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    p.write_bytes(bytes(flipped))
    with pytest.raises(CorruptFileError):
        load_params(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CorruptFileError):
        load_params(p)


def test_weight_file_version_mismatch(tmp_path):
    model = DeepGraphONet(SMALL)
    p = tmp_path / "w.dgon"
    save_params(model, p)
    body = bytearray(p.read_bytes()[:-4])
    body[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    with pytest.raises(VersionMismatchError):
        load_params(p)


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(latent_dim=0)
    with pytest.raises(ConfigError):
        ModelConfig(variant="other")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"latent_dim": 4, "typo": 1})
    assert ModelConfig(m=51).input_width == 51
    assert ModelConfig(m=51, variant="resolution_independent").input_width == 50
    ref = ModelConfig.reference()
    assert (ref.n_gnn_layers, ref.n_trunk_layers, ref.latent_dim) == (20, 5, 100)


def test_no_weight_depends_on_graph():
    model = DeepGraphONet(ModelConfig(m=11, latent_dim=8))
    for _, t in model.store.items():
        assert 6 not in t.shape or t.ndim == 0
    assert model.store["branch.0.W1"].shape == (64, 11)


def test_check_compatible():
    model = DeepGraphONet(SMALL)
    model.check_compatible("standard", 5, 0.004, 0.002)
    with pytest.raises(CompatibilityError, match="m"):
        model.check_compatible("standard", 7, 0.004, 0.002)
