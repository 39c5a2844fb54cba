"""Weighted graphs with killing, example families and graph surgery.

A :class:`WeightedGraph` is a finite window: vertices ``0..n-1``, edges stored
once with ``u < v``, a killing measure ``kappa`` and a ``leak`` array holding
the total weight of edges cut by the window.  Under the killed-boundary
policy the leak acts as extra killing; samplers report it as an escape.

The cable system is implicit: edge ``{x, y}`` has length ``1/(2 lambda_xy)``
and the killing cable at ``x`` has length ``1/(2 kappa_x)``.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

FAMILIES = (
    "grid-with-killing",
    "regular-tree",
    "geometric-tree",
    "growing-weight-tree",
    "z2-pinned",
    "custom-file",
    "two-vertex",
    "path",
)


class GraphError(ValueError):
    """Raised for invalid graph data or parameters."""


class WeightedGraph:
    """Finite weighted graph with killing measure and window leak.

    Parameters
    ----------
    n : int
        Number of vertices.
    edges : array_like, shape (m, 2)
        Edge endpoints; stored canonically with ``u < v``.
    weights : array_like, shape (m,)
        Positive conductances ``lambda_xy``.
    kappa : array_like, shape (n,)
        Killing measure.
    leak : array_like, shape (n,), optional
        Weight of window-cut edges at each vertex (0 for genuinely finite graphs).
    coords : ndarray, optional
        Integer positions (lattices) or ``(generation, parent)`` pairs (trees).
    meta : dict, optional
        Family tag and parameters.
    """

    def __init__(self, n, edges, weights, kappa, leak=None, coords=None, meta=None):
        self.n = int(n)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if len(edges) != len(weights):
            raise GraphError("edges and weights differ in length")
        if len(edges) and (edges.min() < 0 or edges.max() >= self.n):
            raise GraphError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GraphError("self-loops are not allowed")
        if np.any(~np.isfinite(weights)) or np.any(weights <= 0):
            raise GraphError("edge weights must be positive and finite")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        order = np.lexsort((hi, lo))
        self.edges = np.stack([lo[order], hi[order]], axis=1)
        self.weights = weights[order]
        if len(self.edges) > 1:
            dup = np.all(self.edges[1:] == self.edges[:-1], axis=1)
            if dup.any():
                raise GraphError("multigraphs are not supported (duplicate edge %s)" % (self.edges[1:][dup][0],))
        self.kappa = np.asarray(kappa, dtype=float).reshape(-1).copy()
        self.leak = np.zeros(self.n) if leak is None else np.asarray(leak, dtype=float).reshape(-1).copy()
        if self.kappa.shape != (self.n,) or self.leak.shape != (self.n,):
            raise GraphError("kappa/leak must have one entry per vertex")
        if np.any(~np.isfinite(self.kappa)) or np.any(self.kappa < 0):
            raise GraphError("killing measure must be finite and non-negative")
        if np.any(self.leak < 0):
            raise GraphError("leak must be non-negative")
        self.coords = coords
        self.meta = dict(meta or {})
        self.kappa.setflags(write=False)
        self.leak.setflags(write=False)
        self.edges.setflags(write=False)
        self.weights.setflags(write=False)
        lam = self.kappa + self.leak
        np.add.at(lam, self.edges[:, 0], self.weights)
        np.add.at(lam, self.edges[:, 1], self.weights)
        bad = np.flatnonzero(lam <= 0)
        if len(bad):
            raise GraphError("vertex %d has lambda_x = 0 (isolated and unkilled)" % bad[0])
        self.lam = lam
        self.lam.setflags(write=False)
        self._adj = None
        self._index = None

    # ------------------------------------------------------------------ basics
    @property
    def m(self):
        return len(self.edges)

    @property
    def rho(self):
        """Edge lengths ``1/(2 lambda_xy)``."""
        return 0.5 / self.weights

    @property
    def kill_total(self):
        """Killing used by the linear algebra: ``kappa + leak``."""
        return self.kappa + self.leak

    def adjacency(self):
        """CSR adjacency; ``data`` holds weights, plus edge indices in ``edge_index``."""
        if self._adj is None:
            u, v = self.edges[:, 0], self.edges[:, 1]
            eid = np.arange(self.m)
            rows = np.concatenate([u, v])
            cols = np.concatenate([v, u])
            order = np.lexsort((cols, rows))
            rows, cols = rows[order], cols[order]
            w = np.concatenate([self.weights, self.weights])[order]
            e = np.concatenate([eid, eid])[order]
            indptr = np.zeros(self.n + 1, dtype=np.int64)
            np.add.at(indptr, rows + 1, 1)
            indptr = np.cumsum(indptr)
            self._adj = (indptr, cols.astype(np.int64), w, e.astype(np.int64))
        return self._adj

    def neighbors(self, x):
        indptr, cols, w, _ = self.adjacency()
        return cols[indptr[x]:indptr[x + 1]], w[indptr[x]:indptr[x + 1]]

    def weight_matrix(self):
        u, v = self.edges[:, 0], self.edges[:, 1]
        A = sp.coo_matrix((np.concatenate([self.weights, self.weights]),
                           (np.concatenate([u, v]), np.concatenate([v, u]))), shape=(self.n, self.n))
        return A.tocsr()

    def precision(self):
        """Sparse precision matrix ``diag(lambda_x) - A`` (CSC)."""
        return (sp.diags(self.lam) - self.weight_matrix()).tocsc()

    def edge_index(self, x, y):
        a, b = (x, y) if x < y else (y, x)
        indptr, cols, _, e = self.adjacency()
        row = cols[indptr[a]:indptr[a + 1]]
        k = np.searchsorted(row, b)
        if k >= len(row) or row[k] != b:
            raise KeyError((x, y))
        return int(e[indptr[a] + k])

    def is_connected(self):
        ncomp, _ = connected_components(self.weight_matrix(), directed=False)
        return ncomp == 1

    def is_tree(self):
        return self.m == self.n - 1 and self.is_connected()

    def boundary_vertices(self):
        return np.flatnonzero(self.leak > 0)

    def with_meta(self, **kw):
        meta = dict(self.meta)
        meta.update(kw)
        return WeightedGraph(self.n, self.edges, self.weights, self.kappa, self.leak, self.coords, meta)

    def replace_killing(self, kappa=None, leak=None):
        return WeightedGraph(self.n, self.edges, self.weights,
                             self.kappa if kappa is None else kappa,
                             self.leak if leak is None else leak, self.coords, self.meta)

    def __repr__(self):
        return "WeightedGraph(n=%d, m=%d, family=%s)" % (self.n, self.m, self.meta.get("family", "custom"))

    def vertex_of(self, point):
        """Vertex id of a lattice point (grid families)."""
        if self._index is None:
            self._index = {tuple(int(c) for c in row): i for i, row in enumerate(np.asarray(self.coords))}
        return self._index[tuple(int(c) for c in point)]

    def to_text(self):
        """Serialize to the line-oriented graph format."""
        lines = ["vertices %d" % self.n]
        for (u, v), w in zip(self.edges, self.weights):
            lines.append("edge %d %d %s" % (u, v, repr(float(w))))
        for x in np.flatnonzero(self.kill_total > 0):
            lines.append("kill %d %s" % (x, repr(float(self.kill_total[x]))))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- cables
@dataclass(frozen=True)
class CableCoordinate:
    """A point of the cable system.

    ``kind`` is ``"edge"`` or ``"kill"``; ``carrier`` is the edge index or the
    vertex carrying the killing cable; ``anchor`` is the endpoint the offset is
    measured from.
    """

    kind: str
    carrier: int
    anchor: int
    offset: float

    def normalized(self, graph: WeightedGraph) -> "CableCoordinate":
        if self.kind == "kill":
            rho = np.inf if graph.kill_total[self.carrier] == 0 else 0.5 / graph.kill_total[self.carrier]
            if not 0 <= self.offset < rho:
                raise GraphError("offset outside the killing cable")
            return self
        u, v = graph.edges[self.carrier]
        rho = graph.rho[self.carrier]
        if not 0 <= self.offset <= rho + 1e-15:
            raise GraphError("offset outside the edge")
        if self.anchor == u:
            return self
        if self.anchor != v:
            raise GraphError("anchor is not an endpoint of the carrier")
        return CableCoordinate("edge", self.carrier, int(u), float(rho - self.offset))

    def same_point(self, other: "CableCoordinate", graph: WeightedGraph, tol=1e-12) -> bool:
        a, b = self.normalized(graph), other.normalized(graph)
        return a.kind == b.kind and a.carrier == b.carrier and abs(a.offset - b.offset) <= tol


# ------------------------------------------------------------------ families
@dataclass(frozen=True)
class GraphSpec:
    """Family tag plus parameters.

    Recognised parameters: ``dim``, ``radius`` (lattice half-width or tree
    depth), ``d``, ``alpha``, ``kappa``, ``weight``, ``boundary`` (``"window"``
    for a window of an infinite family with leak, ``"free"`` for a finite
    graph), ``n0``/``step``/``growth``/``c`` for growing trees, ``path`` for
    custom files.
    """

    family: str
    params: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.params.get(key, default)

    def with_params(self, **kw):
        p = dict(self.params)
        p.update(kw)
        return GraphSpec(self.family, p)


def _param(spec, key, default=None, required=False):
    if required and key not in spec.params:
        raise GraphError("family %s requires parameter %r" % (spec.family, key))
    return spec.params.get(key, default)


def build_graph(spec: GraphSpec) -> WeightedGraph:
    """Materialize a family window described by ``spec``."""
    fam = spec.family
    if fam == "grid-with-killing":
        return grid(int(_param(spec, "dim", 2)), int(_param(spec, "radius", required=True)),
                    float(_param(spec, "kappa", 1.0)), float(_param(spec, "weight", 1.0)),
                    _param(spec, "boundary", "window"))
    if fam in ("regular-tree", "geometric-tree", "growing-weight-tree"):
        depth = spec.params.get("depth", spec.params.get("radius"))
        if depth is None:
            raise GraphError("tree family requires 'depth'")
        return level_tree(spec).materialize(int(depth), boundary=_param(spec, "boundary", "window"))
    if fam == "z2-pinned":
        return z2_pinned(int(_param(spec, "radius", required=True)))
    if fam == "two-vertex":
        return WeightedGraph(2, [[0, 1]], [float(_param(spec, "weight", 1.0))],
                             [float(_param(spec, "kappa", 1.0))] * 2, meta={"family": fam})
    if fam == "path":
        n = int(_param(spec, "length", 3))
        kap = np.zeros(n)
        kap[_param(spec, "killed", [n - 1])] = float(_param(spec, "kappa", 1.0))
        return WeightedGraph(n, [[i, i + 1] for i in range(n - 1)], np.full(n - 1, float(_param(spec, "weight", 1.0))),
                             kap, coords=np.arange(n)[:, None], meta={"family": fam})
    if fam == "custom-file":
        with open(_param(spec, "path", required=True)) as fh:
            return parse_graph_text(fh.read())
    raise GraphError("unknown family %r (known: %s)" % (fam, ", ".join(FAMILIES)))


def grid(dim, radius, kappa=1.0, weight=1.0, boundary="window"):
    """Box ``{|x|_inf <= radius}`` of ``Z^dim`` with constant killing.

    ``boundary="window"`` keeps the weight of cut edges as leak (a window of
    the infinite lattice); ``"free"`` gives the finite grid graph.
    """
    if dim < 1 or radius < 1:
        raise GraphError("grid requires dim >= 1 and radius >= 1")
    if kappa < 0 or weight <= 0:
        raise GraphError("grid requires kappa >= 0 and weight > 0")
    if boundary not in ("window", "free"):
        raise GraphError("boundary must be 'window' or 'free'")
    side = 2 * radius + 1
    shape = (side,) * dim
    n = side ** dim
    idx = np.arange(n).reshape(shape)
    coords = np.stack(np.unravel_index(np.arange(n), shape), axis=1) - radius
    edges = []
    for ax in range(dim):
        a = np.take(idx, np.arange(side - 1), axis=ax).ravel()
        b = np.take(idx, np.arange(1, side), axis=ax).ravel()
        edges.append(np.stack([a, b], axis=1))
    edges = np.concatenate(edges)
    leak = np.zeros(n)
    if boundary == "window":
        leak = weight * np.sum(np.abs(coords) == radius, axis=1).astype(float)
    return WeightedGraph(n, edges, np.full(len(edges), weight), np.full(n, kappa), leak, coords,
                         {"family": "grid-with-killing", "dim": dim, "radius": radius, "kappa": kappa,
                          "weight": weight, "boundary": boundary})


def z2_pinned(radius):
    """Window of ``Z^2`` (weights 1/4) with infinite killing at the origin, reduced."""
    if radius < 2:
        raise GraphError("z2-pinned requires radius >= 2")
    g = grid(2, radius, kappa=0.0, weight=0.25, boundary="window")
    origin = g.vertex_of((0, 0))
    red, keep = reduce_infinite_killing(g, [origin])
    return WeightedGraph(red.n, red.edges, red.weights, red.kappa, red.leak, g.coords[keep],
                         {"family": "z2-pinned", "radius": radius, "removed": [(0, 0)]})


def reduce_infinite_killing(graph: WeightedGraph, marked):
    """Delete vertices with infinite killing; neighbors gain ``kappa += lambda``.

    Returns
    -------
    reduced : WeightedGraph
    keep : ndarray
        ``keep[i]`` is the original id of reduced vertex ``i``.
    """
    marked = np.unique(np.asarray(list(marked), dtype=np.int64))
    if len(marked) == 0:
        return graph, np.arange(graph.n)
    is_marked = np.zeros(graph.n, dtype=bool)
    is_marked[marked] = True
    keep = np.flatnonzero(~is_marked)
    new_id = -np.ones(graph.n, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    kappa = graph.kappa.copy()
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    mu, mv = is_marked[u], is_marked[v]
    np.add.at(kappa, u[mv & ~mu], graph.weights[mv & ~mu])
    np.add.at(kappa, v[mu & ~mv], graph.weights[mu & ~mv])
    inner = ~mu & ~mv
    edges = np.stack([new_id[u[inner]], new_id[v[inner]]], axis=1)
    red = WeightedGraph(len(keep), edges, graph.weights[inner], kappa[keep], graph.leak[keep],
                        None if graph.coords is None else np.asarray(graph.coords)[keep],
                        dict(graph.meta, reduced_from=graph.n))
    ncomp, labels = connected_components(red.weight_matrix(), directed=False)
    if ncomp > 1:
        sizes = np.bincount(labels)
        small = int(np.argmin(sizes))
        members = keep[labels == small][:10]
        raise GraphError("removing the marked vertices disconnects the graph; component of size %d "
                         "contains original vertices %s" % (sizes[small], members.tolist()))
    return red, keep


# --------------------------------------------------------------- subdivision
@dataclass
class Subdivision:
    """Subdivided graph with the maps back to the base cable system.

    ``kind[i]`` is 0 for an original vertex, 1 for a point inside an edge and
    2 for a point on a killing cable; ``carrier[i]`` is the edge index (or the
    vertex id for cables) and ``offset[i]`` is measured from the canonical
    anchor (edge endpoint ``u`` or the cable's vertex).
    """

    base: WeightedGraph
    graph: WeightedGraph
    n_sub: int
    kind: np.ndarray
    carrier: np.ndarray
    offset: np.ndarray
    cables: bool

    def to_coordinate(self, i) -> CableCoordinate:
        k, c, t = int(self.kind[i]), int(self.carrier[i]), float(self.offset[i])
        if k == 0:
            return CableCoordinate("vertex", i, i, 0.0)
        if k == 1:
            return CableCoordinate("edge", c, int(self.base.edges[c, 0]), t)
        return CableCoordinate("kill", c, c, t)

    def to_vertex(self, p: CableCoordinate) -> int:
        """Nearest sub-vertex of a cable point."""
        if p.kind == "vertex":
            return p.carrier
        q = p.normalized(self.base)
        n = self.n_sub
        if q.kind == "edge":
            rho = self.base.rho[q.carrier]
            k = int(round(q.offset * n / rho))
            u, v = self.base.edges[q.carrier]
            if k <= 0:
                return int(u)
            if k >= n:
                return int(v)
            return self.base.n + q.carrier * (n - 1) + (k - 1)
        if not self.cables:
            return q.carrier
        rho = 0.5 / self.base.kill_total[q.carrier] if self.base.kill_total[q.carrier] > 0 else np.inf
        k = int(round(q.offset * n / rho))
        if k <= 0:
            return q.carrier
        k = min(k, n - 1)
        return int(self._cable_start[q.carrier]) + (k - 1)

    def interpolate(self, values, cable_end=None):
        """Extend vertex values linearly along cables (harmonic on edges)."""
        values = np.asarray(values, dtype=float)
        out = np.empty(self.graph.n)
        out[: self.base.n] = values
        for i in range(self.base.n, self.graph.n):
            c, t = self.carrier[i], self.offset[i]
            if self.kind[i] == 1:
                u, v = self.base.edges[c]
                s = t / self.base.rho[c]
                out[i] = (1 - s) * values[u] + s * values[v]
            else:
                end = values[c] if cable_end is None else cable_end[c]
                s = t * 2 * self.base.kappa[c]
                out[i] = (1 - s) * values[c] + s * end
        return out


def subdivide(graph: WeightedGraph, n: int, cables: bool = False) -> Subdivision:
    """Split every edge into ``n`` pieces of weight ``n * lambda``.

    With ``cables=True`` the killing cables (``kappa`` only, not the window
    leak) are split as well: the cable at ``x`` becomes a path of ``n - 1`` new
    vertices, the last one killed at rate ``n * kappa_x``.
    """
    if int(n) != n or n < 1:
        raise GraphError("subdivision order must be a positive integer")
    n = int(n)
    N, m = graph.n, graph.m
    kinds = [np.zeros(N, dtype=np.int8)]
    carriers = [np.arange(N)]
    offsets = [np.zeros(N)]
    new_edges, new_w = [], []
    kappa = [graph.kappa.copy()]
    leak = [graph.leak.copy()]
    if n == 1:
        sub = Subdivision(graph, graph, 1, kinds[0], carriers[0], offsets[0], cables)
        sub._cable_start = np.arange(N)
        return sub
    k = np.arange(1, n)
    ids = N + np.arange(m)[:, None] * (n - 1) + (k - 1)[None, :]
    chain = np.concatenate([graph.edges[:, :1], ids, graph.edges[:, 1:]], axis=1)
    new_edges.append(np.stack([chain[:, :-1].ravel(), chain[:, 1:].ravel()], axis=1))
    new_w.append(np.repeat(n * graph.weights, n))
    kinds.append(np.ones(m * (n - 1), dtype=np.int8))
    carriers.append(np.repeat(np.arange(m), n - 1))
    offsets.append((graph.rho[:, None] * k[None, :] / n).ravel())
    kappa.append(np.zeros(m * (n - 1)))
    leak.append(np.zeros(m * (n - 1)))
    total = N + m * (n - 1)
    cable_start = np.arange(N)
    if cables:
        killed = np.flatnonzero(graph.kappa > 0)
        c = len(killed)
        cable_start = np.full(N, -1)
        cable_start[killed] = total + np.arange(c) * (n - 1)
        cids = total + np.arange(c)[:, None] * (n - 1) + (k - 1)[None, :]
        cchain = np.concatenate([killed[:, None], cids], axis=1)
        new_edges.append(np.stack([cchain[:, :-1].ravel(), cchain[:, 1:].ravel()], axis=1))
        new_w.append(np.repeat(n * graph.kappa[killed], n - 1))
        kinds.append(np.full(c * (n - 1), 2, dtype=np.int8))
        carriers.append(np.repeat(killed, n - 1))
        rho_x = 0.5 / graph.kappa[killed]
        offsets.append((rho_x[:, None] * k[None, :] / n).ravel())
        tip_k = np.zeros((c, n - 1))
        tip_k[:, -1] = n * graph.kappa[killed]
        kappa[0] = graph.kappa.copy()
        kappa[0][killed] = 0.0
        kappa.append(tip_k.ravel())
        leak.append(np.zeros(c * (n - 1)))
        total += c * (n - 1)
    g = WeightedGraph(total, np.concatenate(new_edges), np.concatenate(new_w), np.concatenate(kappa),
                      np.concatenate(leak), None, dict(graph.meta, subdivided=n, cables=cables))
    sub = Subdivision(graph, g, n, np.concatenate(kinds), np.concatenate(carriers), np.concatenate(offsets), cables)
    sub._cable_start = cable_start
    return sub


def contract_lengths(sub: Subdivision):
    """Sum sub-edge lengths back onto base edges (inverse of subdivision)."""
    base, g = sub.base, sub.graph
    if sub.n_sub == 1:
        return g.rho.copy()
    owner = g.edges[:, 1]
    on_edge = sub.kind[owner] == 1
    out = np.zeros(base.m)
    np.add.at(out, sub.carrier[owner[on_edge]], g.rho[on_edge])
    return out


# --------------------------------------------------------------------- balls
def ball(graph: WeightedGraph, x: int, L: int):
    """Graph-distance ball ``{d(x, y) < L}`` and its internal boundary.

    A vertex is on the internal boundary when it has a neighbour outside the
    ball; window-cut edges count as outside neighbours.
    """
    if L < 1:
        raise GraphError("L must be >= 1")
    dist = bfs_distances(graph, x, limit=L)
    inside = np.flatnonzero((dist >= 0) & (dist < L))
    indptr, cols, _, _ = graph.adjacency()
    inb = np.zeros(graph.n, dtype=bool)
    inb[inside] = True
    boundary = []
    for y in inside:
        nb = cols[indptr[y]:indptr[y + 1]]
        if graph.leak[y] > 0 or np.any(~inb[nb]):
            boundary.append(y)
    return inside, np.asarray(boundary, dtype=np.int64)


def bfs_distances(graph: WeightedGraph, x: int, limit=None):
    """Graph distances from ``x`` (``-1`` when unreached or beyond ``limit``)."""
    indptr, cols, _, _ = graph.adjacency()
    dist = -np.ones(graph.n, dtype=np.int64)
    dist[x] = 0
    frontier = np.array([x])
    d = 0
    while len(frontier) and (limit is None or d < limit):
        nxt = np.concatenate([cols[indptr[y]:indptr[y + 1]] for y in frontier])
        nxt = np.unique(nxt[dist[nxt] < 0])
        d += 1
        dist[nxt] = d
        frontier = nxt
    return dist


# ------------------------------------------------------------- level trees
@dataclass(frozen=True)
class LevelTree:
    """Generation-homogeneous rooted tree.

    Every vertex of generation ``n`` has ``children(n)`` children joined by
    edges of weight ``weight(n)`` and killing ``kappa(n)``.  Vertices are
    generated lazily by :class:`LazyTree`; :meth:`materialize` gives a window.
    """

    children: Callable[[int], int]
    weight: Callable[[int], float]
    kappa: Callable[[int], float]
    family: str
    params: dict

    def lam(self, n):
        up = self.weight(n - 1) if n > 0 else 0.0
        return self.kappa(n) + up + self.children(n) * self.weight(n)

    def generation_sizes(self, depth):
        sizes = [1]
        for g in range(depth):
            sizes.append(sizes[-1] * self.children(g))
        return sizes

    def materialize(self, depth, boundary="window", max_vertices=2_000_000):
        """Generations ``0..depth``; the last generation leaks to its children."""
        if depth < 0:
            raise GraphError("depth must be >= 0")
        sizes = self.generation_sizes(depth)
        total = sum(sizes)
        if total > max_vertices:
            raise GraphError("tree window with %d vertices exceeds the limit; use lazy exploration" % total)
        gen = np.concatenate([np.full(s, g) for g, s in enumerate(sizes)])
        start = np.concatenate([[0], np.cumsum(sizes)])
        parent = -np.ones(total, dtype=np.int64)
        edges, w = [], []
        for g in range(depth):
            c = self.children(g)
            kids = np.arange(start[g + 1], start[g + 2])
            par = np.repeat(np.arange(start[g], start[g + 1]), c)
            parent[kids] = par
            edges.append(np.stack([par, kids], axis=1))
            w.append(np.full(len(kids), self.weight(g)))
        kap = np.array([self.kappa(g) for g in gen], dtype=float)
        leak = np.zeros(total)
        if boundary == "window":
            leak[gen == depth] = self.children(depth) * self.weight(depth)
        edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
        w = np.concatenate(w) if w else np.zeros(0)
        meta = dict(self.params, family=self.family, depth=depth, boundary=boundary,
                    generation=gen, parent=parent)
        return WeightedGraph(total, edges, w, kap, leak, np.stack([gen, parent], axis=1), meta)


def level_tree(spec: GraphSpec) -> LevelTree:
    fam = spec.family
    if fam == "regular-tree":
        d = int(_param(spec, "d", 2))
        kap = float(_param(spec, "kappa", 0.0))
        if d < 2:
            raise GraphError("regular-tree requires d >= 2")
        if kap < 0:
            raise GraphError("kappa must be >= 0")
        w = float(_param(spec, "weight", 1.0))
        return LevelTree(lambda n: d + 1 if n == 0 else d, lambda n: w, lambda n: kap, fam,
                         {"d": d, "kappa": kap, "weight": w})
    if fam == "geometric-tree":
        d = int(_param(spec, "d", 2))
        alpha = float(_param(spec, "alpha", required=True))
        if d < 2:
            raise GraphError("geometric-tree requires d >= 2")
        if not 0 < alpha < 1:
            raise GraphError("geometric-tree requires alpha in (0, 1)")
        root_kill = 0.0 if alpha > 1.0 / d else 1.0
        return LevelTree(lambda n: d + 1 if n == 0 else d, lambda n: alpha ** n,
                         lambda n: root_kill if n == 0 else 0.0, fam, {"d": d, "alpha": alpha})
    if fam == "growing-weight-tree":
        n0 = int(_param(spec, "n0", 2))
        step = int(_param(spec, "step", 1))
        growth = float(_param(spec, "growth", 1.0))
        c = float(_param(spec, "c", 1.0))
        if n0 < 1 or step < 0:
            raise GraphError("growing-weight-tree requires n0 >= 1 and step >= 0")
        if c <= 0:
            raise GraphError("growing-weight-tree requires c > 0 (killing proportional to degree)")
        if growth < 1:
            raise GraphError("growing-weight-tree requires growth >= 1")

        def children(n):
            return n0 + step * n

        def weight(n):
            return growth ** n

        def kappa(n):
            return c * children(n) * min(weight(n), weight(max(n - 1, 0)))

        return LevelTree(children, weight, kappa, fam, {"n0": n0, "step": step, "growth": growth, "c": c})
    raise GraphError("family %r is not a level tree" % fam)


class LazyTree:
    """Lazily generated vertices of a :class:`LevelTree`.

    Vertex 0 is the root; new ids are handed out on first request and
    memoized under a lock, so concurrent readers see a single consistent tree.
    """

    def __init__(self, tree: LevelTree):
        self.tree = tree
        self._lock = threading.Lock()
        self.generation = [0]
        self.parent = [-1]
        self._children = {}

    def children(self, x):
        kids = self._children.get(x)
        if kids is None:
            with self._lock:
                kids = self._children.get(x)
                if kids is None:
                    g = self.generation[x]
                    c = self.tree.children(g)
                    start = len(self.generation)
                    self.generation.extend([g + 1] * c)
                    self.parent.extend([x] * c)
                    kids = range(start, start + c)
                    self._children[x] = kids
        return kids

    def __len__(self):
        return len(self.generation)


# --------------------------------------------------------------- text format
def parse_graph_text(text: str) -> WeightedGraph:
    """Parse ``vertices N`` / ``edge x y lambda`` / ``kill x kappa`` / ``killinf x``.

    Numbers are read as exact decimals and converted once to float.
    """
    n = None
    edges, weights = [], []
    kill = {}
    inf = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "vertices" and len(tok) == 2:
                if n is not None:
                    raise GraphError("duplicate 'vertices' header")
                n = int(tok[1])
            elif n is None:
                raise GraphError("'vertices N' must come first")
            elif tok[0] == "edge" and len(tok) == 4:
                edges.append((int(tok[1]), int(tok[2])))
                weights.append(float(Fraction(Decimal(tok[3]))))
            elif tok[0] == "kill" and len(tok) == 3:
                x = int(tok[1])
                kill[x] = kill.get(x, 0.0) + float(Fraction(Decimal(tok[2])))
            elif tok[0] == "killinf" and len(tok) == 2:
                inf.append(int(tok[1]))
            else:
                raise GraphError("unrecognised line")
        except (ValueError, InvalidOperation, GraphError) as exc:
            raise GraphError("line %d: %s (%r)" % (lineno, exc, raw)) from None
    if n is None:
        raise GraphError("missing 'vertices N' header")
    kappa = np.zeros(n)
    for x, k in kill.items():
        if not 0 <= x < n:
            raise GraphError("kill vertex %d out of range" % x)
        kappa[x] = k
    g = WeightedGraph(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2), weights, kappa,
                      meta={"family": "custom-file"})
    if inf:
        g, keep = reduce_infinite_killing(g, inf)
        g = g.with_meta(original_ids=keep)
    if not g.is_connected():
        raise GraphError("graph is not connected")
    return g


def random_graph(rng: np.random.Generator, n: int, extra_edges: int = None, kill_fraction=0.5,
                 weight_range=(0.2, 3.0), kappa_range=(0.05, 2.0)) -> WeightedGraph:
    """Random connected weighted graph with killing on a random subset."""
    parent = np.array([rng.integers(0, i) for i in range(1, n)], dtype=np.int64)
    edges = {(int(min(p, i + 1)), int(max(p, i + 1))) for i, p in enumerate(parent)}
    extra = n if extra_edges is None else extra_edges
    extra = min(extra, n * (n - 1) // 2 - len(edges))
    while extra > 0:
        a, b = rng.integers(0, n, size=2)
        if a != b and (min(a, b), max(a, b)) not in edges:
            edges.add((int(min(a, b)), int(max(a, b))))
            extra -= 1
    edges = np.array(sorted(edges), dtype=np.int64)
    w = rng.uniform(*weight_range, size=len(edges))
    kappa = np.where(rng.random(n) < kill_fraction, rng.uniform(*kappa_range, size=n), 0.0)
    if not kappa.any():
        kappa[rng.integers(0, n)] = rng.uniform(*kappa_range)
    return WeightedGraph(n, edges, w, kappa, meta={"family": "random"})
