import numpy as np
import pytest

from cablegff.graph import (CableCoordinate, GraphError, GraphSpec, WeightedGraph, ball, build_graph,
                            contract_lengths, grid, parse_graph_text, random_graph, reduce_infinite_killing,
                            subdivide)
from cablegff.linalg import PrecisionFactor
from cablegff.potential import GreenOracle


def test_geometric_tree_weights():
    g = build_graph(GraphSpec("geometric-tree", {"d": 2, "alpha": 0.5, "depth": 3}))
    gen = np.asarray(g.meta["generation"])
    for (u, v), w in zip(g.edges, g.weights):
        assert w == pytest.approx(0.5 ** min(gen[u], gen[v]))


def test_geometric_tree_killing_rule():
    # no killing for alpha > 1/d; unit killing at the root for alpha <= 1/d
    g = build_graph(GraphSpec("geometric-tree", {"d": 3, "alpha": 0.5, "depth": 3}))
    assert np.all(g.kappa == 0)
    g = build_graph(GraphSpec("geometric-tree", {"d": 2, "alpha": 0.5, "depth": 3}))
    assert g.kappa[0] == 1.0 and np.all(g.kappa[1:] == 0)


def test_regular_tree_root_degree():
    g = build_graph(GraphSpec("regular-tree", {"d": 2, "kappa": 0.0, "depth": 1, "boundary": "free"}))
    assert g.n == 4
    assert np.allclose(g.weights, 1.0)
    assert g.lam[0] == pytest.approx(3.0)


def test_grid_lambda_is_kappa_plus_degree():
    g = grid(2, 2, kappa=1.0, boundary="free")
    deg = np.bincount(g.edges.ravel(), minlength=g.n)
    assert np.allclose(g.lam, 1.0 + deg)


def test_window_leak_restores_degree():
    g = grid(2, 2, kappa=1.0, boundary="window")
    assert np.allclose(g.lam, 5.0)


def test_reduce_infinite_killing_origin():
    g = grid(2, 2, kappa=0.0, weight=0.25, boundary="window")
    o = g.vertex_of((0, 0))
    red, keep = reduce_infinite_killing(g, [o])
    assert red.n == g.n - 1
    nbrs = [g.vertex_of(p) for p in ((1, 0), (-1, 0), (0, 1), (0, -1))]
    new = {int(k): i for i, k in enumerate(keep)}
    for y in nbrs:
        assert red.kappa[new[y]] == pytest.approx(0.25)


def test_reduce_hitting_matches_path_enumeration():
    # path a-b-c-d with c marked: killing at b equals the jump rate to c
    g = WeightedGraph(4, [[0, 1], [1, 2], [2, 3]], [1.0, 2.0, 1.0], [0.5, 0.0, 0.0, 1.0])
    with pytest.raises(GraphError):
        reduce_infinite_killing(g, [2])
    g2 = WeightedGraph(3, [[0, 1], [1, 2]], [1.0, 2.0], [0.5, 0.0, 0.0])
    red, keep = reduce_infinite_killing(g2, [2])
    assert list(keep) == [0, 1]
    assert red.kappa[1] == pytest.approx(2.0)
    # killing probability from b in one step: 2/3 before and after
    assert red.kappa[1] / red.lam[1] == pytest.approx(2.0 / 3.0)


def test_reduce_no_marks_identity():
    g = grid(1, 3, 1.0)
    red, keep = reduce_infinite_killing(g, [])
    assert red is g


def test_subdivide_weights_and_lengths():
    g = WeightedGraph(2, [[0, 1]], [1.0], [1.0, 1.0])
    s = subdivide(g, 2)
    assert s.graph.n == 3
    assert np.allclose(s.graph.weights, 2.0)
    assert np.allclose(contract_lengths(s), g.rho)
    s1 = subdivide(g, 1)
    assert np.allclose(s1.graph.weights, g.weights)


def test_subdivide_preserves_green_on_base_vertices():
    g = WeightedGraph(2, [[0, 1]], [1.0], [1.0, 1.0])
    G0 = np.linalg.inv(g.precision().toarray())
    for cables in (False, True):
        s = subdivide(g, 4, cables=cables)
        G1 = np.linalg.inv(s.graph.precision().toarray())[:2, :2]
        assert np.allclose(G0, G1, atol=1e-10)


def test_ball_counts():
    g = build_graph(GraphSpec("regular-tree", {"d": 2, "depth": 4}))
    inside, _ = ball(g, 0, 3)
    assert len(inside) == 10
    z = grid(2, 3, 1.0)
    inside, bnd = ball(z, z.vertex_of((0, 0)), 1)
    assert list(inside) == [z.vertex_of((0, 0))] and list(bnd) == list(inside)


def test_tree_ball_boundary_is_last_generation():
    g = build_graph(GraphSpec("geometric-tree", {"d": 2, "alpha": 0.5, "depth": 5}))
    inside, bnd = ball(g, 0, 3)
    gen = np.asarray(g.meta["generation"])
    assert set(gen[bnd]) == {2}


def test_text_round_trip():
    g = random_graph(np.random.default_rng(0), 12)
    h = parse_graph_text(g.to_text())
    assert np.allclose(h.precision().toarray(), g.precision().toarray())


def test_parse_errors():
    with pytest.raises(GraphError):
        parse_graph_text("vertices 2\nedge 0 5 1.0\n")
    with pytest.raises(GraphError):
        parse_graph_text("vertices 2\nedge 0 1 -1.0\n")


def test_cable_coordinate_anchor_normalisation():
    g = WeightedGraph(2, [[0, 1]], [1.0], [1.0, 1.0])
    a = CableCoordinate("edge", 0, 0, 0.1)
    b = CableCoordinate("edge", 0, 1, 0.4)
    assert a.same_point(b, g)
    with pytest.raises(GraphError):
        CableCoordinate("edge", 0, 0, 0.9).normalized(g)


def test_unknown_family():
    with pytest.raises(GraphError):
        build_graph(GraphSpec("nope", {}))


def test_sparse_and_dense_factor_agree(monkeypatch):
    import cablegff.linalg as la
    g = grid(2, 4, 1.0)
    Q = g.precision()
    dense = PrecisionFactor(Q)
    monkeypatch.setattr(la, "DENSE_LIMIT", 5)
    sparse = la.PrecisionFactor(Q)
    assert dense.dense and not sparse.dense
    b = np.arange(g.n, dtype=float)
    assert np.allclose(dense.solve(b), sparse.solve(b), atol=1e-12)
    z = np.random.default_rng(1).standard_normal((g.n, 3))
    C_s = sparse.sample(np.eye(g.n))
    assert np.allclose(C_s @ C_s.T, GreenOracle(g).matrix(), atol=1e-10)
    assert sparse.sample(z).shape == (g.n, 3)


def test_random_graph_small_n_terminates():
    g = random_graph(np.random.default_rng(0), 4)
    assert g.m == 6
