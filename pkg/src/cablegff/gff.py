"""Discrete Gaussian free field samples and cable-level edge openness.

Vertex fields are drawn from a Cholesky-type factor of the precision matrix
(or, on trees, by the parent-to-child Markov recursion).  Given the vertex
values, the cable field on an edge of length ``rho`` is a Brownian bridge of
variance 2 per unit time, and

    P(bridge stays >= level) = 1 - exp(-(u - level)(v - level) / rho)

for endpoint values ``u, v`` above the level.  Weighted levels ``level * h``
with ``h`` linear on cables give the same formula with ``level * h(x)`` in
place of the level, which is what a Doob transform by ``h`` produces.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .graph import GraphError, GraphSpec, LevelTree, WeightedGraph, build_graph, z2_pinned
from .linalg import PrecisionFactor
from .potential import HarmonicFn

logger = logging.getLogger(__name__)


@dataclass
class FieldSample:
    values: np.ndarray
    seed: int
    replica: int


@dataclass
class FieldBatch:
    """Replicas ``r0 .. r0 + len - 1`` of a field, one row per replica."""

    values: np.ndarray
    seed: int
    r0: int = 0
    coords: np.ndarray | None = None

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        return FieldSample(self.values[i], self.seed, self.r0 + i)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass
class EdgeOpenness:
    level: float
    open: np.ndarray
    prob: np.ndarray
    weighted: bool = False


# ----------------------------------------------------------------- sampling
def sample_discrete_gff(graph, n: int, seed: int, window=None, r0: int = 0, factor=None) -> FieldBatch:
    """``n`` replicas of the discrete GFF with covariance ``g`` on the window."""
    if isinstance(graph, GraphSpec):
        graph = build_graph(graph if window is None else graph.with_params(radius=window))
    fac = factor or PrecisionFactor(graph.precision())
    z = rngmod.block_draws(seed, rngmod.GFF, r0, r0 + n, graph.n)
    vals = fac.sample(z.T).T
    return FieldBatch(np.ascontiguousarray(vals), seed, r0, graph.coords)


def bridge_open_prob(u, v, rho, level=0.0):
    """Probability that a variance-2 Brownian bridge from ``u`` to ``v`` over
    length ``rho`` stays ``>= level``."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ValueError("cable length must be positive")
    a = np.asarray(u, dtype=float) - level
    b = np.asarray(v, dtype=float) - level
    with np.errstate(over="ignore"):
        p = np.where((a > 0) & (b > 0), -np.expm1(-np.maximum(a, 0) * np.maximum(b, 0) / rho), 0.0)
    return float(p) if p.ndim == 0 else p


def edge_open_prob(values, graph: WeightedGraph, level, weight: HarmonicFn | None = None):
    """Per-edge crossing probabilities for one or many vertex fields."""
    vals = np.atleast_2d(values)
    e = graph.edges
    hl = np.full(graph.n, float(level)) if weight is None else float(level) * weight.values
    a = vals[:, e[:, 0]] - hl[e[:, 0]]
    b = vals[:, e[:, 1]] - hl[e[:, 1]]
    p = np.where((a > 0) & (b > 0), -np.expm1(-np.clip(a, 0, None) * np.clip(b, 0, None) / graph.rho), 0.0)
    return p if np.ndim(values) > 1 else p[0]


def sample_openness(field, graph: WeightedGraph, level, weight: HarmonicFn | None = None, seed=0):
    """Edge openness of ``{phi >= level}`` (or ``{phi >= level * h}``) given the vertex field.

    ``field`` is a :class:`FieldSample` or :class:`FieldBatch`; uniforms are keyed
    by ``(seed, replica, edge)``.
    """
    if isinstance(field, FieldSample):
        vals, r0 = field.values[None, :], field.replica
    else:
        vals, r0 = field.values, field.r0
    p = edge_open_prob(vals, graph, level, weight)
    u = rngmod.block_draws(seed, rngmod.OPEN, r0, r0 + len(vals), graph.m, kind="uniform")
    op = u < p
    if isinstance(field, FieldSample):
        return EdgeOpenness(float(level), op[0], p[0], weight is not None)
    return EdgeOpenness(float(level), op, p, weight is not None)


# --------------------------------------------------------------------- trees
@dataclass
class TreeRecursion:
    """Per-vertex (or per-generation) Markov coefficients of the tree field.

    ``phi_x = q_x phi_parent + sqrt(g_x) Y_x``; ``q_x = P_x(H_parent < inf)``
    and ``g_x`` is the Green function at ``x`` of the subtree with the parent
    removed.
    """

    q: np.ndarray
    g: np.ndarray
    beta: np.ndarray


def tree_recursion(graph: WeightedGraph) -> TreeRecursion:
    if not graph.is_tree():
        raise GraphError("tree sampler requires a tree")
    parent, order = _tree_order(graph)
    lam = graph.lam
    wpar = np.zeros(graph.n)
    kids = order[1:]
    wpar[kids] = [graph.weights[graph.edge_index(int(x), int(parent[x]))] for x in kids]
    q = np.zeros(graph.n)
    beta = np.zeros(graph.n)
    g = np.zeros(graph.n)
    for x in order[::-1]:
        one = 1.0 - beta[x]
        g[x] = 1.0 / (lam[x] * one)
        if parent[x] >= 0:
            q[x] = wpar[x] / (lam[x] * one)
            beta[parent[x]] += wpar[x] * q[x] / lam[parent[x]]
    return TreeRecursion(q, g, beta)


def _tree_order(graph):
    meta_parent = graph.meta.get("parent")
    if meta_parent is not None and len(meta_parent) == graph.n:
        parent = np.asarray(meta_parent, dtype=np.int64)
        gen = np.asarray(graph.meta["generation"])
        return parent, np.argsort(gen, kind="stable")
    indptr, cols, _, _ = graph.adjacency()
    parent = -np.ones(graph.n, dtype=np.int64)
    seen = np.zeros(graph.n, dtype=bool)
    seen[0] = True
    order = [0]
    for x in order:
        for y in cols[indptr[x]:indptr[x + 1]]:
            if not seen[y]:
                seen[y] = True
                parent[y] = x
                order.append(int(y))
    return parent, np.asarray(order)


def generation_recursion(tree: LevelTree, depth: int, truncation: int = None, boundary="window"):
    """Per-generation ``(q_n, g_n, lambda_n)`` for ``n = 0..depth`` of a level tree.

    Computed backward from generation ``truncation`` (default ``depth + 60``),
    where the window boundary is treated as killing.
    """
    D = depth + 60 if truncation is None else max(truncation, depth)
    lam = np.array([tree.lam(n) for n in range(D + 1)])
    if boundary == "free":
        lam[D] -= tree.children(D) * tree.weight(D)
    q = np.zeros(D + 1)
    g = np.zeros(D + 1)
    for n in range(D, -1, -1):
        beta = 0.0 if n == D else tree.children(n) * tree.weight(n) * q[n + 1] / lam[n]
        one = 1.0 - beta
        g[n] = 1.0 / (lam[n] * one)
        q[n] = (tree.weight(n - 1) / (lam[n] * one)) if n > 0 else 0.0
    return q[:depth + 1], g[:depth + 1], lam[:depth + 1]


def sample_tree_gff(graph: WeightedGraph, n: int, seed: int, r0: int = 0) -> FieldBatch:
    """Tree GFF by the parent-to-child recursion (no factorization)."""
    rec = tree_recursion(graph)
    parent, order = _tree_order(graph)
    z = rngmod.block_draws(seed, rngmod.TREE, r0, r0 + n, graph.n)
    phi = np.zeros((n, graph.n))
    sd = np.sqrt(rec.g)
    phi[:, order[0]] = sd[order[0]] * z[:, order[0]]
    gen = graph.meta.get("generation")
    if gen is not None:
        gen = np.asarray(gen)
        for k in range(1, int(gen.max()) + 1):
            xs = np.nonzero(gen == k)[0]
            phi[:, xs] = rec.q[xs] * phi[:, parent[xs]] + sd[xs] * z[:, xs]
    else:
        for x in order[1:]:
            phi[:, x] = rec.q[x] * phi[:, parent[x]] + sd[x] * z[:, x]
    return FieldBatch(phi, seed, r0, graph.coords)


# ----------------------------------------------------------------------- 2D
def sample_pinned_z2(window: int, n: int, seed: int, r0: int = 0) -> FieldBatch:
    """Pinned field on the box of radius ``window``: ``phi(0) = 0``.

    Columns follow ``coords`` (all box points, origin included).
    """
    g = z2_pinned(window)
    batch = sample_discrete_gff(g, n, seed, r0=r0)
    side = 2 * window + 1
    ii, jj = np.meshgrid(np.arange(side) - window, np.arange(side) - window, indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()], axis=1)
    full = np.zeros((n, side * side))
    pos = (g.coords[:, 0] + window) * side + (g.coords[:, 1] + window)
    full[:, pos] = batch.values
    return FieldBatch(full, seed, r0, coords)


# --------------------------------------------------------------------- checks
def covariance_zscores(values, G):
    """Entrywise ``(cov_hat - G) / se`` with the empirical standard error."""
    X = np.asarray(values, dtype=float)
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (n - 1)
    V = X.shape[1]
    z = np.zeros((V, V))
    for i in range(V):
        prod = Xc[:, i:i + 1] * Xc
        se = prod.std(axis=0, ddof=1) / np.sqrt(n)
        z[i] = (C[i] - G[i]) / se
    return z


def write_field_csv(path, batch: FieldBatch):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "vertex", "value"])
        for i in range(len(batch)):
            for x, v in enumerate(batch.values[i]):
                w.writerow([batch.r0 + i, x, "%.12g" % v])


def write_openness_csv(path, op: EdgeOpenness, graph: WeightedGraph, r0=0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replica", "u", "v"])
        rows = np.atleast_2d(op.open)
        for i, row in enumerate(rows):
            for e in np.nonzero(row)[0]:
                w.writerow([r0 + i, int(graph.edges[e, 0]), int(graph.edges[e, 1])])
