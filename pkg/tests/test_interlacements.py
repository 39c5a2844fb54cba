import io

import numpy as np
import pytest
from scipy import stats

from cablegff.graph import GraphSpec, WeightedGraph, build_graph, grid, random_graph
from cablegff.interlacements import (classify, dump_soup, killed_setup, local_times_and_range, occupation_blocks,
                                     sample_killed_soup, sample_window_soup, window_setup)
from cablegff.iso import two_sample
from cablegff.potential import GreenOracle, equilibrium_measure, kill_probability


def two_vertex():
    return WeightedGraph(2, [[0, 1]], [1.0], [1.0, 1.0])


def _blocks(st, levels, N, seed, **kw):
    bs = list(occupation_blocks(st, levels, N, seed, **kw))
    return (np.concatenate([b.counts for b in bs]), np.concatenate([b.ltime for b in bs]),
            np.concatenate([b.ntraj for b in bs]))


def test_zero_level_is_empty():
    assert len(sample_killed_soup(two_vertex(), 0.0, seed=0)) == 0
    assert len(sample_window_soup(two_vertex(), [0], 0.0, seed=0)) == 0
    lt = local_times_and_range(sample_killed_soup(two_vertex(), 0.0, seed=0))
    assert np.all(lt.ell == 0)


def test_negative_level_rejected():
    with pytest.raises(ValueError):
        sample_killed_soup(two_vertex(), -1.0, seed=0)


def test_number_of_trajectories_is_poisson_mean():
    g = random_graph(np.random.default_rng(1), 10)
    _, _, nt = _blocks(killed_setup(g), [0.7], 20000, seed=2)
    mu = 0.7 * g.kappa.sum()
    assert abs(nt[:, 0].mean() - mu) <= 4 * np.sqrt(mu / 20000)


def test_two_vertex_emptiness():
    N = 100000
    c, _, _ = _blocks(killed_setup(two_vertex()), [1.0], N, seed=3)
    freq = np.mean(c[:, 0, 0] == 0)
    p = np.exp(-1.5)
    assert abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / N)


def test_single_vertex_local_time_mean():
    g = WeightedGraph(1, np.zeros((0, 2), dtype=int), [], [2.0])
    _, lt, _ = _blocks(killed_setup(g), [1.0], 40000, seed=4)
    x = lt[:, 0, 0]
    assert abs(x.mean() - 1.0) <= 4 * x.std() / np.sqrt(len(x))


def test_prefix_stability_and_level_coupling():
    g = grid(2, 2, kappa=0.5, boundary="free")
    st = killed_setup(g)
    c1, l1, _ = _blocks(st, [0.3, 1.0], 3000, seed=5, block=700)
    c2, l2, _ = _blocks(st, [0.3, 1.0], 1000, seed=5, block=4096)
    assert np.array_equal(c1[:1000], c2) and np.array_equal(l1[:1000], l2)
    c3, _, _ = _blocks(st, [0.3, 1.0], 1000, seed=5, r0=0, workers=2, block=300)
    assert np.array_equal(c3, c2)
    assert np.all(c1[:, 0] <= c1[:, 1])


def test_full_soup_restrict_is_monotone():
    g = grid(2, 2, kappa=0.5, boundary="free")
    s = sample_killed_soup(g, 2.0, seed=6)
    r = s.restrict(1.0)
    assert all(t.label <= 1.0 for t in r.trajectories)
    assert len(r) <= len(s)


def test_massless_interior_killed_soup_empty():
    g = grid(2, 2, kappa=0.0)
    assert len(sample_killed_soup(g, 5.0, seed=0)) == 0


def test_hitting_count_poisson():
    rng = np.random.default_rng(7)
    g = random_graph(rng, 8)
    K = [0, 3]
    u, N = 1.0, 10000
    cap = equilibrium_measure(g, K).total
    st = killed_setup(g)
    counts = np.zeros(N, dtype=int)
    for r in range(N):
        s = sample_killed_soup(g, u, seed=8, replica=r, setup=st)
        counts[r] = sum(1 for t in s.trajectories if np.isin(t.forward, K).any())
    mu = u * cap
    kmax = max(int(stats.poisson.ppf(0.999, mu)), counts.max())
    obs = np.bincount(counts, minlength=kmax + 1)[:kmax + 1]
    exp = stats.poisson.pmf(np.arange(kmax + 1), mu) * N
    exp[-1] += stats.poisson.sf(kmax, mu) * N
    keep = exp >= 5
    o = np.append(obs[keep], obs[~keep].sum())
    e = np.append(exp[keep], exp[~keep].sum())
    if e[-1] == 0:
        o, e = o[:-1], e[:-1]
    assert stats.chisquare(o, e * o.sum() / e.sum()).pvalue > 1e-3


def test_window_soup_local_time_mean():
    # forward parts start at the first entrance into K, so their mean local time
    # is u sum_y e_K(y) g(y, x); on K the backward parts contribute nothing
    g = grid(2, 2, kappa=0.3)
    K = [g.vertex_of((0, 0)), g.vertex_of((1, 0))]
    u, N = 0.8, 10000
    st = window_setup(g, K)
    eq = equilibrium_measure(g, K)
    exact = u * eq.weights @ GreenOracle(g).matrix()
    fwd = np.array([local_times_and_range(sample_window_soup(g, K, u, 9, r, setup=st), forward_only=True).ell
                    for r in range(N)])
    se = fwd.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(fwd.mean(axis=0) - exact) <= 4 * se)
    _, lt, _ = _blocks(st, [u], 40000, seed=9)
    full = lt[:, 0][:, K]
    se = full.std(axis=0, ddof=1) / np.sqrt(40000)
    assert np.all(np.abs(full.mean(axis=0) - exact[K]) <= 4 * se)


def test_window_soup_backward_never_returns():
    g = grid(2, 3, kappa=0.2)
    K = [g.vertex_of((0, 0))]
    for r in range(50):
        s = sample_window_soup(g, K, 2.0, seed=10, replica=r)
        for t in s.trajectories:
            assert not np.isin(t.backward, K).any()


def test_killed_and_window_soups_agree_when_killing_is_certain():
    g = grid(2, 1, kappa=1.0, boundary="free")
    N = 40000
    a, _, _ = _blocks(killed_setup(g), [0.5], N, seed=11)
    b, _, _ = _blocks(window_setup(g, range(g.n)), [0.5], N, seed=12)
    assert two_sample(a[:, 0].astype(float), b[:, 0].astype(float), list(range(g.n))).passed
    s = sample_window_soup(g, range(g.n), 1.0, seed=3)
    assert set(classify(s)[0]) <= {"KK"}


def test_kk_start_intensity():
    g = grid(2, 2, kappa=0.3)
    hk, _ = kill_probability(g, "survives")
    x = g.vertex_of((0, 0))
    N, u = 4000, 1.0
    st = killed_setup(g)
    kk = []
    for r in range(N):
        s = sample_killed_soup(g, u, 13, r, setup=st)
        kk.append(sum(1 for t in s.trajectories if t.start == x and t.cls == "KK"))
    kk = np.array(kk)
    exact = u * g.kappa[x] * hk.values[x]
    assert abs(kk.mean() - exact) <= 4 * kk.std() / np.sqrt(N)


def test_dump_format():
    s = sample_killed_soup(grid(1, 2, kappa=1.0), 1.0, seed=1)
    fh = io.StringIO()
    dump_soup(s, fh)
    lines = fh.getvalue().splitlines()
    assert lines[0].startswith("# soup v1 recipe=killed")
    assert len(lines) == len(s) + 1


def test_tree_soup_only_from_killed_vertices():
    g = build_graph(GraphSpec("growing-weight-tree", {"depth": 2}))
    s = sample_killed_soup(g, 1.0, 0)
    assert all(g.kappa[t.start] > 0 for t in s.trajectories)
