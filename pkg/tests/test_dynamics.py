import math

import numpy as np
import pytest

from deepgraphonet.dynamics import (SystemSpec, Trajectory, heat_exact, heat_rhs, integrate,
                                    kuramoto_rhs, load_trajectory_csv, rk4_step,
                                    save_trajectory_csv, simulate, simulate_many)
from deepgraphonet.errors import ConfigError, DataValidationError, IntegrationBlowupError
from deepgraphonet.graph import Graph, laplacian, path_graph, random_connected_graph

TRIANGLE = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def test_heat_rhs_examples():
    np.testing.assert_allclose(heat_rhs(TRIANGLE, [2.0, 2.0, 2.0], 1.0), 0.0, atol=0)
    np.testing.assert_array_equal(heat_rhs(TRIANGLE, [1.0, 0.0, 0.0], 1.0), [-2, 1, 1])
    x = np.random.default_rng(0).normal(size=3)
    assert abs(heat_rhs(TRIANGLE, x, 0.7).sum()) < 1e-14


def _kuramoto_loop(g, theta, omega, K):
    out = []
    for i in range(g.node_count):
        nb = g.neighbors[i]
        s = sum(math.sin(theta[j] - theta[i]) for j in nb)
        out.append(omega[i] + (K / len(nb)) * s if nb else omega[i])
    return np.array(out)


def test_kuramoto_examples():
    g = random_connected_graph(5, 2, 0)
    omega = np.array([0.1, -0.3, 0.5, 0.0, 1.0])
    np.testing.assert_allclose(kuramoto_rhs(g, np.full(5, 0.4), omega, 2.0), omega, atol=1e-15)
    two = path_graph(2)
    np.testing.assert_allclose(kuramoto_rhs(two, [0.0, math.pi / 2], [0, 0], 1.0), [1, -1], atol=1e-15)


def test_kuramoto_matches_scalar_loop():
    rng = np.random.default_rng(4)
    g = Graph(6, random_connected_graph(5, 3, 9).edges)  # node 5 isolated
    theta, omega = rng.uniform(-3, 3, 6), rng.normal(size=6)
    np.testing.assert_allclose(kuramoto_rhs(g, theta, omega, 1.3), _kuramoto_loop(g, theta, omega, 1.3),
                               atol=1e-14)
    assert kuramoto_rhs(g, theta, omega, 1.3)[5] == omega[5]


def test_rk4_zero_rhs():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(lambda v: np.zeros_like(v), x, 0.1), x)


def test_rk4_exponential_decay():
    # one RK4 step on a linear ODE is the degree-4 Taylor polynomial of exp
    h = 0.1
    x1 = rk4_step(lambda v: -v, np.array([1.0]), h)
    assert x1[0] == pytest.approx(1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24, abs=1e-15)
    assert x1[0] == pytest.approx(0.9048375, abs=1e-10)
    # local truncation error h^5/120 ~ 8.3e-8: seven matching digits of e^-0.1
    assert abs(x1[0] - math.exp(-0.1)) < 1e-7


def test_rk4_two_half_steps_beat_one_full_step():
    A = np.array([[-1.0, 0.3], [0.2, -2.0]])
    rhs = lambda v: A @ v  # noqa: E731
    x0 = np.array([1.0, 0.5])
    w, V = np.linalg.eig(A)
    exact = (V @ np.diag(np.exp(w * 0.2)) @ np.linalg.solve(V, x0)).real
    full = rk4_step(rhs, x0, 0.2)
    half = rk4_step(rhs, rk4_step(rhs, x0, 0.1), 0.1)
    assert np.linalg.norm(half - exact) < np.linalg.norm(full - exact)


def test_rk4_blowup():
    with pytest.raises(IntegrationBlowupError), np.errstate(over="ignore"):
        rk4_step(lambda v: v * 1e308, np.array([1e10]), 1.0)
    with pytest.raises(ConfigError):
        rk4_step(lambda v: v, np.array([1.0]), 0.0)


def test_simulate_heat_conserves_sum():
    g = random_connected_graph(6, 3, 1)
    tr = simulate(SystemSpec(seed=5), g, 700)
    s = tr.states.sum(axis=1)
    assert np.max(np.abs(s - s[0])) <= 1e-9 * np.abs(s[0])


def test_simulate_heat_triangle_equilibrates_against_matrix_exponential():
    tr = simulate(SystemSpec(), TRIANGLE, 10_000, dt=1e-3, x0=[1.0, 0.0, 0.0])
    exact = heat_exact(TRIANGLE, [1.0, 0.0, 0.0], 1.0, tr.times())
    np.testing.assert_allclose(tr.states, exact, atol=1e-12)
    np.testing.assert_allclose(tr.states[-1], 1 / 3, atol=1e-6)


def test_heat_exact_independent_of_rk4():
    # oracle sanity: derivative of the closed form equals -L x
    g = path_graph(4)
    x0 = np.array([1.0, -0.5, 0.2, 0.0])
    eps = 1e-6
    xs = heat_exact(g, x0, 2.0, [0.3 - eps, 0.3, 0.3 + eps])
    np.testing.assert_allclose((xs[2] - xs[0]) / (2 * eps), -2.0 * laplacian(g) @ xs[1], atol=1e-8)


def test_simulate_deterministic_and_shaped():
    g = random_connected_graph(6, 3, 1)
    a = simulate(SystemSpec(seed=3), g, 50)
    b = simulate(SystemSpec(seed=3), g, 50)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.states.shape == (51, 6)
    assert a.duration == pytest.approx(0.05)
    c = simulate_many(SystemSpec(seed=3), g, 2, 50)
    np.testing.assert_array_equal(c[0].states, a.states)
    assert not np.array_equal(c[1].states, a.states)


def test_kuramoto_zero_coupling_is_linear_drift():
    g = random_connected_graph(5, 2, 2)
    omega = np.array([0.5, -1.0, 2.0, 0.1, 0.0])
    theta0 = np.array([0.1, 0.2, -0.3, 1.0, 2.0])
    rhs = lambda th: kuramoto_rhs(g, th, omega, 0.0)  # noqa: E731
    xs = integrate(rhs, theta0, 100, 1e-2)
    t = np.arange(101)[:, None] * 1e-2
    np.testing.assert_allclose(xs, theta0 + omega * t, atol=1e-8)


def test_system_spec_validation():
    with pytest.raises(ConfigError):
        SystemSpec(diffusivity=0.0)
    with pytest.raises(ConfigError):
        SystemSpec(kind="kuramoto", coupling=-1.0, omega=[0.0])
    with pytest.raises(ConfigError):
        SystemSpec(kind="kuramoto", omega=[0.0]).rhs(path_graph(3))
    spec = SystemSpec(kind="kuramoto", omega=[0.0, 1.0, 2.0], coupling=1.0, ic_low=-3, ic_high=3)
    tr = simulate(spec, path_graph(3), 20, dt=1e-2)
    assert tr.states.shape == (21, 3)


def test_csv_round_trip(tmp_path):
    g = path_graph(2)
    p = tmp_path / "t.csv"
    p.write_text("1,2\n3,4\n")
    tr = load_trajectory_csv(p, g, 1e-3)
    np.testing.assert_array_equal(tr.states, [[1, 2], [3, 4]])
    out = tmp_path / "o.csv"
    save_trajectory_csv(simulate(SystemSpec(seed=1), g, 5), out)
    back = load_trajectory_csv(out, g, 1e-3)
    np.testing.assert_array_equal(back.states, simulate(SystemSpec(seed=1), g, 5).states)


def test_csv_header_and_columns(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b,c\n1,2,3\n4,5,6\n")
    tr = load_trajectory_csv(p, path_graph(2), 1.0, header=True, columns=[2, 0])
    np.testing.assert_array_equal(tr.states, [[3, 1], [6, 4]])


def test_csv_errors(tmp_path):
    g = path_graph(2)
    p = tmp_path / "t.csv"
    p.write_text("1,2,3\n4,5,6\n")
    with pytest.raises(DataValidationError, match="ragged"):
        load_trajectory_csv(p, g, 1e-3)
    p.write_text("1,2\n3,4,5\n")
    with pytest.raises(DataValidationError, match="ragged"):
        load_trajectory_csv(p, g, 1e-3)
    p.write_text("1,2\n3,NaN\n")
    with pytest.raises(DataValidationError, match="row 2, column 2"):
        load_trajectory_csv(p, g, 1e-3)
    p.write_text("1,2\nx,4\n")
    with pytest.raises(DataValidationError, match="row 2, column 1"):
        load_trajectory_csv(p, g, 1e-3)
    with pytest.raises(FileNotFoundError):
        load_trajectory_csv(tmp_path / "missing.csv", g, 1e-3)


def test_trajectory_invariants():
    g = path_graph(2)
    with pytest.raises(DataValidationError):
        Trajectory(g, 1e-3, np.ones((1, 2)))
    with pytest.raises(DataValidationError):
        Trajectory(g, 0.0, np.ones((3, 2)))
    with pytest.raises(Exception):
        Trajectory(g, 1e-3, np.ones((3, 3)))
