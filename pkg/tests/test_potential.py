import numpy as np
import pytest

from cablegff.graph import GraphSpec, WeightedGraph, build_graph, grid, random_graph
from cablegff.potential import (GreenOracle, a_asymptotic, capacity, capacity_2d, equilibrium_measure, green,
                                hitting_probability, kill_probability, last_exit_residual, potential_kernel_oracle,
                                potential_kernel_z2, solve_harmonic)


def two_vertex():
    return WeightedGraph(2, [[0, 1]], [1.0], [1.0, 1.0])


def test_single_vertex_green():
    g = WeightedGraph(1, np.zeros((0, 2), dtype=int), [], [2.0])
    assert GreenOracle(g).g(0, 0) == pytest.approx(0.5)


def test_two_vertex_green_closed_form():
    G = GreenOracle(two_vertex()).matrix()
    assert np.allclose(G, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-14)


def test_massive_segment_green_decays_geometrically():
    g = grid(1, 20, kappa=1.0, boundary="free")
    col = GreenOracle(g).column(g.vertex_of((0,)))
    vals = np.array([col[g.vertex_of((k,))] for k in range(10)])
    ratios = vals[1:] / vals[:-1]
    # infinite-line rate 1/(3/2 + sqrt(5)/2) up to boundary effects
    assert np.allclose(ratios, 2 / (3 + np.sqrt(5)), rtol=1e-3)
    # bound from the one-step killing chance: g(L) <= g(0) (1 - kappa/lambda)^L
    assert np.all(vals <= vals[0] * (1 - 1 / 3) ** np.arange(10) + 1e-12)


def test_green_family_convergence_log():
    o = green(GraphSpec("grid-with-killing", {"dim": 2, "kappa": 1.0}), window=8, probes=[((0, 0), (0, 0))])
    radii = [r for r, _ in o.convergence_log]
    vals = [row[0] for _, row in o.convergence_log]
    assert radii == [2, 4, 8]
    assert abs(vals[-1] - vals[-2]) < abs(vals[1] - vals[0]) + 1e-15


def test_kill_probability_finite_graph_is_one():
    hk, hs = kill_probability(two_vertex())
    assert np.allclose(hk.values, 1.0) and np.allclose(hs.values, 0.0)
    t = build_graph(GraphSpec("geometric-tree", {"d": 3, "alpha": 0.5, "depth": 4}))
    hk, _ = kill_probability(t, "survives")
    assert np.allclose(hk.values, 0.0)


def test_kill_probability_window_policies_bracket():
    g = grid(2, 3, kappa=0.1)
    up, _ = kill_probability(g, "killed")
    lo, _ = kill_probability(g, "survives")
    assert np.all(lo.values <= up.values + 1e-15)
    assert np.allclose(up.values, 1.0)
    assert np.all(lo.values > 0) and np.all(lo.values < 1)


def test_two_vertex_equilibrium():
    eq = equilibrium_measure(two_vertex(), [0])
    assert eq.weights[0] == pytest.approx(1.5)
    assert eq.total == pytest.approx(1.5)
    assert eq.escape[0] == pytest.approx(0.75)


def test_whole_window_equilibrium_is_kappa():
    g = random_graph(np.random.default_rng(3), 15)
    eq = equilibrium_measure(g, range(g.n))
    assert np.allclose(eq.weights, g.kappa, atol=1e-12)


def test_equilibrium_at_least_kappa_for_constant_killing():
    g = grid(2, 3, kappa=0.7, boundary="free")
    for x in range(0, g.n, 5):
        assert equilibrium_measure(g, [x]).weights[x] >= 0.7 - 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_singleton_capacity_and_last_exit(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 25)
    o = GreenOracle(g)
    for x in rng.choice(g.n, 4, replace=False):
        assert capacity(g, [x]) * o.g(x, x) == pytest.approx(1.0, abs=1e-9)
    F = rng.choice(g.n, 6, replace=False)
    assert last_exit_residual(o, F) < 1e-9


def test_hitting_probability_enumeration():
    # path 0-1-2 with killing only at 2; from 0 the walk must pass 1
    g = WeightedGraph(3, [[0, 1], [1, 2]], [1.0, 1.0], [0.0, 0.0, 1.0])
    assert hitting_probability(g, [1])[0] == pytest.approx(1.0)
    # from 2: jump to 1 with prob 1/2, otherwise killed
    assert hitting_probability(g, [1])[2] == pytest.approx(0.5)


def test_capacity_variational_lower_bound():
    rng = np.random.default_rng(7)
    g = random_graph(rng, 30)
    G = GreenOracle(g).matrix()
    for _ in range(10):
        A = rng.choice(g.n, rng.integers(1, 8), replace=False)
        assert capacity(g, A) >= 1.0 / G[np.ix_(A, A)].mean() - 1e-12


def test_family_capacity_log():
    val, log = capacity(GraphSpec("grid-with-killing", {"dim": 2, "kappa": 1.0}), [(0, 0)], window=8)
    assert log.stable and log.radii == [2, 4, 8]


def test_solve_harmonic_residual():
    g = random_graph(np.random.default_rng(2), 20)
    c = np.random.default_rng(4).uniform(0.5, 2, g.n)
    h = solve_harmonic(g, c)
    r = g.kappa * c + g.weight_matrix() @ h.values - g.lam * h.values
    assert np.max(np.abs(r)) < 1e-12


def test_potential_kernel_values():
    a = potential_kernel_z2(64)
    assert a((0, 0)) == 0.0
    assert a((1, 0)) == pytest.approx(1.0, abs=1e-4)
    assert a((1, 1)) == pytest.approx(4 / np.pi, abs=1e-4)
    assert a.residual < 1e-9


def test_potential_kernel_oracle_extrapolation():
    v, err, _ = potential_kernel_oracle((1, 0), sizes=(16, 32, 64))
    assert abs(v - 1.0) <= 1e-3 and err <= 1e-3


def test_a_asymptotic_far_field():
    a = potential_kernel_z2(32)
    assert a((10, 3)) == pytest.approx(float(a_asymptotic(np.array([10, 3]))), abs=1e-5)


def test_capacity_2d_small_sets():
    assert capacity_2d([(0, 0)]).value == 0.0
    c = capacity_2d([(0, 0), (1, 0)])
    # Green function of Z^{2,0}_a at e1 is 2 a(e1) / a(e1)^2 = 2
    assert c.value == pytest.approx(0.5, abs=1e-6)
    assert c.stable
    d = capacity_2d([(0, 0), (1, 1)])
    assert d.value == pytest.approx(2 / np.pi, abs=1e-6)
    assert capacity_2d([(0, 0), (1, 0), (-1, 0)]).value >= c.value
