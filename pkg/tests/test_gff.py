import numpy as np
import pytest
from scipy import stats

from cablegff.gff import (bridge_open_prob, covariance_zscores, edge_open_prob, generation_recursion,
                          sample_discrete_gff, sample_openness, sample_pinned_z2, sample_tree_gff, tree_recursion)
from cablegff.graph import GraphSpec, WeightedGraph, build_graph, level_tree, z2_pinned
from cablegff.iso import two_sample
from cablegff.potential import GreenOracle
from oracles import bridge_stays_above_mc


def two_vertex():
    return WeightedGraph(2, [[0, 1]], [1.0], [1.0, 1.0])


def test_single_vertex_variance():
    g = WeightedGraph(1, np.zeros((0, 2), dtype=int), [], [2.0])
    x = sample_discrete_gff(g, 40000, seed=0).values[:, 0]
    assert x.var() == pytest.approx(0.5, abs=4 * 0.5 * np.sqrt(2 / 40000))


def test_two_vertex_correlation_and_mean():
    b = sample_discrete_gff(two_vertex(), 50000, seed=1).values
    assert np.corrcoef(b.T)[0, 1] == pytest.approx(0.5, abs=0.02)
    assert np.all(np.abs(b.mean(axis=0)) <= 4 * np.sqrt(2 / 3 / 50000))


def test_replicas_independent_of_chunking():
    g = two_vertex()
    a = sample_discrete_gff(g, 3000, seed=5).values
    b = np.concatenate([sample_discrete_gff(g, 1000, seed=5, r0=r).values for r in (0, 1000, 2000)])
    assert np.array_equal(a, b)


def test_bridge_open_prob_closed_form():
    assert bridge_open_prob(1.0, 1.0, 0.5) == pytest.approx(1 - np.exp(-2.0), abs=1e-15)
    assert bridge_open_prob(0.0, 1.0, 0.5) == 0.0
    assert bridge_open_prob(2.0, 1.0, 0.5, level=2.0) == 0.0
    p = [bridge_open_prob(u, 1.0, 0.5) for u in (0.5, 1.0, 1.5)]
    assert p[0] < p[1] < p[2]
    with pytest.raises(ValueError):
        bridge_open_prob(1.0, 1.0, 0.0)


def test_bridge_open_prob_against_monte_carlo():
    n = 40000
    mc = bridge_stays_above_mc(1.0, 1.0, 0.5, 0.0, n, seed=2)
    p = bridge_open_prob(1.0, 1.0, 0.5)
    assert abs(mc - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_edge_openness_limits():
    g = two_vertex()
    assert not sample_openness(sample_discrete_gff(g, 1, 0)[0], g, level=50.0).open.any()
    vals = np.array([[0.4, 0.7]])
    assert edge_open_prob(vals, g, -1e6)[0, 0] == pytest.approx(1.0)
    assert edge_open_prob(vals, g, 0.0)[0, 0] == pytest.approx(1 - np.exp(-2 * 0.4 * 0.7))


def test_openness_frequency_matches_probability():
    g = two_vertex()
    b = sample_discrete_gff(g, 50000, seed=3)
    op = sample_openness(b, g, 0.0, seed=3)
    assert abs(op.open.mean() - op.prob.mean()) <= 4 * np.sqrt(op.prob.mean() / 50000)


def test_tree_recursion_conditional_variance():
    g = build_graph(GraphSpec("regular-tree", {"d": 2, "kappa": 0.5, "depth": 3, "boundary": "free"}))
    rec = tree_recursion(g)
    G = GreenOracle(g).matrix()
    assert rec.g[0] == pytest.approx(G[0, 0])
    x = 1
    cond = G[x, x] - G[x, 0] ** 2 / G[0, 0]
    assert rec.g[x] == pytest.approx(cond)


def test_tree_sampler_matches_factorization_sampler():
    g = build_graph(GraphSpec("regular-tree", {"d": 2, "kappa": 0.5, "depth": 3, "boundary": "free"}))
    a = sample_tree_gff(g, 100000, seed=4).values
    b = sample_discrete_gff(g, 100000, seed=4).values
    assert two_sample(a, b, list(range(0, g.n, 3))).passed
    G = GreenOracle(g).matrix()
    assert np.max(np.abs(covariance_zscores(a[:, :6], G[:6, :6]))) < 4.5


def test_generation_recursion_matches_materialized():
    spec = GraphSpec("regular-tree", {"d": 2, "kappa": 0.5})
    q, gg, lam = generation_recursion(level_tree(spec), 3, truncation=3, boundary="free")
    g = level_tree(spec).materialize(3, boundary="free")
    rec = tree_recursion(g)
    gen = np.asarray(g.meta["generation"])
    for n in range(4):
        x = int(np.nonzero(gen == n)[0][0])
        assert rec.g[x] == pytest.approx(gg[n]) and rec.q[x] == pytest.approx(q[n])


def test_pinned_z2_field():
    b = sample_pinned_z2(6, 20000, seed=6)
    side = 13
    o = 6 * side + 6
    assert np.all(b.values[:, o] == 0)
    g = z2_pinned(6)
    G = GreenOracle(g)
    for p in ((1, 0), (3, 0)):
        k = (p[0] + 6) * side + (p[1] + 6)
        v = G.g(g.vertex_of(p), g.vertex_of(p))
        assert b.values[:, k].var() == pytest.approx(v, rel=4 * np.sqrt(2 / 20000))
    # well inside a larger window the variance grows with |x|
    big = z2_pinned(32)
    Gb = GreenOracle(big)
    diag = [Gb.g(big.vertex_of((k, 0)), big.vertex_of((k, 0))) for k in range(1, 8)]
    assert np.all(np.diff(diag) > 0)


def test_gaussian_marginal_ks():
    g = two_vertex()
    x = sample_discrete_gff(g, 20000, seed=9).values[:, 0]
    assert stats.kstest(x / np.sqrt(2 / 3), "norm").pvalue > 1e-3
