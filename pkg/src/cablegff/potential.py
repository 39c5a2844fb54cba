"""Green functions, hitting probabilities, equilibrium measures and capacities."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import GraphError, GraphSpec, WeightedGraph, build_graph
from .linalg import PrecisionFactor, SingularWindow

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.57721566490153286061
A_CONST = (2 * EULER_GAMMA + np.log(8.0)) / np.pi
ESCAPE_TOL = 1e-12


# ---------------------------------------------------------------- containers
@dataclass
class HarmonicFn:
    """Vertex values of a harmonic function plus its killing-cable end values.

    ``cable_end[x]`` is ``h`` at the far end of the killing cable of ``x``
    (only meaningful where ``kappa_x > 0``); ``boundary_end[x]`` plays the same
    role for the window leak.  ``None`` for ``boundary_end`` means the window
    boundary carries no harmonic data and boundary vertices go unchecked.
    """

    values: np.ndarray
    cable_end: np.ndarray
    boundary_end: np.ndarray | None = None
    name: str = "h"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.cable_end = np.asarray(self.cable_end, dtype=float)
        if self.boundary_end is not None:
            self.boundary_end = np.asarray(self.boundary_end, dtype=float)

    @classmethod
    def constant(cls, graph: WeightedGraph, c=1.0):
        return cls(np.full(graph.n, c), np.full(graph.n, c), np.full(graph.n, c), name="const")

    def __len__(self):
        return len(self.values)


@dataclass
class EquilibriumMeasure:
    support: np.ndarray
    weights: np.ndarray
    total: float
    hitting: np.ndarray
    escape: np.ndarray

    @property
    def exterior_boundary(self):
        """Trace-level exterior boundary: points of F that can escape."""
        return self.support[self.escape[self.support] > ESCAPE_TOL]


@dataclass
class ProfileReport:
    L: np.ndarray
    g: np.ndarray
    b: np.ndarray


@dataclass
class CapacityLog:
    radii: list
    values: list
    stable: bool
    tol: float


class GreenOracle:
    """Green function of a finite window, ``G = Q^{-1}`` with ``Q = diag(lambda) - A``."""

    def __init__(self, graph: WeightedGraph):
        self.graph = graph
        try:
            self.factor = PrecisionFactor(graph.precision())
        except SingularWindow:
            raise SingularWindow("recurrent window: no killing and no killed boundary") from None
        self._dense = None
        self._cols = {}
        self.convergence_log = []

    def matrix(self, vertices=None):
        if vertices is None:
            if self._dense is None:
                G = self.factor.inverse()
                self._dense = 0.5 * (G + G.T)
            return self._dense
        vertices = np.asarray(vertices, dtype=np.int64)
        if self._dense is not None:
            return self._dense[np.ix_(vertices, vertices)]
        cols = self.columns(vertices)
        return cols[vertices]

    def column(self, y):
        y = int(y)
        if self._dense is not None:
            return self._dense[:, y]
        if y not in self._cols:
            e = np.zeros(self.graph.n)
            e[y] = 1.0
            self._cols[y] = self.factor.solve(e)
        return self._cols[y]

    def columns(self, ys):
        ys = np.asarray(ys, dtype=np.int64)
        if self._dense is not None:
            return self._dense[:, ys]
        B = np.zeros((self.graph.n, len(ys)))
        B[ys, np.arange(len(ys))] = 1.0
        return self.factor.solve(B)

    def g(self, x, y):
        return float(self.column(y)[x])

    def diag(self):
        if self._dense is not None or self.graph.n <= 4000:
            return np.diag(self.matrix()).copy()
        return np.array([self.g(x, x) for x in range(self.graph.n)])


def green(graph, window=None, probes=None, nested=3):
    """Green oracle of a graph, or of a family window with a convergence log.

    Parameters
    ----------
    graph : WeightedGraph or GraphSpec
        An explicit window, or a family spec materialized at ``window``.
    window : int, optional
        Window radius for family specs.
    probes : list of (point, point), optional
        Probe pairs (lattice points or vertex ids) logged across ``nested``
        windows of radii ``window / 2**k``.
    """
    if isinstance(graph, WeightedGraph):
        return GreenOracle(graph)
    spec = graph if window is None else graph.with_params(radius=window)
    radius = int(spec.get("radius", spec.get("depth", 0)))
    oracle = GreenOracle(build_graph(spec))
    if probes:
        radii = sorted({max(1, radius >> k) for k in range(nested)})
        for r in radii:
            o = oracle if r == radius else GreenOracle(build_graph(spec.with_params(radius=r)))
            row = []
            for p, q in probes:
                row.append(o.g(_vid(o.graph, p), _vid(o.graph, q)))
            oracle.convergence_log.append((r, row))
    return oracle


def _vid(graph, p):
    if isinstance(p, (tuple, list, np.ndarray)):
        return graph.vertex_of(p)
    return int(p)


# --------------------------------------------------------------- harmonics
def kill_probability(graph: WeightedGraph, policy: str = "killed"):
    """Probability to be killed, with the window leak counted per ``policy``.

    ``policy="killed"`` counts window escape as killing (upper bound for the
    infinite graph); ``"survives"`` counts it as survival (lower bound).

    Returns
    -------
    h_kill, h_surv : HarmonicFn
    """
    if policy not in ("killed", "survives"):
        raise ValueError("policy must be 'killed' or 'survives'")
    Q = graph.precision()
    rhs = graph.kappa + (graph.leak if policy == "killed" else 0.0)
    if not np.any(rhs > 0):
        hk = np.zeros(graph.n)
    else:
        hk = PrecisionFactor(Q).solve(rhs)
    hk = np.clip(hk, 0.0, 1.0)
    hs = 1.0 - hk
    bend = 1.0 if policy == "killed" else 0.0
    h_kill = HarmonicFn(hk, np.ones(graph.n), np.full(graph.n, bend), name="h_kill")
    h_surv = HarmonicFn(hs, np.zeros(graph.n), np.full(graph.n, 1.0 - bend), name="h_surv")
    return h_kill, h_surv


def solve_harmonic(graph: WeightedGraph, cable_end, boundary_end=None):
    """Harmonic function with prescribed killing-cable (and leak) end values.

    Solves ``lambda_x h(x) - sum_y lambda_xy h(y) = kappa_x c_x + leak_x b_x``.
    """
    cable_end = np.broadcast_to(np.asarray(cable_end, dtype=float), (graph.n,)).copy()
    b = np.zeros(graph.n) if boundary_end is None else np.broadcast_to(np.asarray(boundary_end, float), (graph.n,)).copy()
    rhs = graph.kappa * cable_end + graph.leak * b
    h = PrecisionFactor(graph.precision()).solve(rhs)
    return HarmonicFn(h, cable_end, b, name="solved")


def hitting_probability(graph: WeightedGraph, F):
    """``u_F(y) = P_y(H_F < zeta)`` by a Dirichlet solve off ``F``."""
    F = _as_set(graph, F)
    inF = np.zeros(graph.n, dtype=bool)
    inF[F] = True
    out = ~inF
    u = np.ones(graph.n)
    if out.any():
        Q = graph.precision()
        Qoo = Q[out][:, out]
        rhs = -(Q[out][:, inF] @ np.ones(inF.sum()))
        sol = spla.spsolve(Qoo.tocsc(), rhs) if Qoo.shape[0] > 1 else rhs / Qoo.toarray().ravel()
        u[out] = np.clip(sol, 0.0, 1.0)
    return u


def equilibrium_measure(graph: WeightedGraph, F) -> EquilibriumMeasure:
    """``e_F(x) = kappa_x + leak_x + sum_y lambda_xy (1 - u_F(y))`` on ``F``."""
    F = _as_set(graph, F)
    u = hitting_probability(graph, F)
    indptr, cols, w, _ = graph.adjacency()
    e = np.zeros(graph.n)
    esc = np.zeros(graph.n)
    for x in F:
        nb = slice(indptr[x], indptr[x + 1])
        e[x] = graph.kill_total[x] + np.dot(w[nb], 1.0 - u[cols[nb]])
        esc[x] = e[x] / graph.lam[x]
    return EquilibriumMeasure(F, e, float(e.sum()), u, esc)


def capacity(graph, F, window=None, radii=None, tol=0.02):
    """Capacity of ``F``; with a family spec, nested-window values and a stabilization flag.

    Returns
    -------
    float, or (float, CapacityLog) for family specs.
    """
    if isinstance(graph, WeightedGraph):
        return equilibrium_measure(graph, F).total
    spec = graph
    radius = int(window if window is not None else spec.get("radius"))
    radii = sorted(radii or {max(1, radius >> k) for k in range(3)})
    vals = []
    for r in radii:
        g = build_graph(spec.with_params(radius=r))
        vals.append(equilibrium_measure(g, [_vid(g, p) for p in F]).total)
    stable = len(vals) < 2 or abs(vals[-1] - vals[-2]) <= tol * abs(vals[-1])
    return vals[-1], CapacityLog(radii, vals, stable, tol)


def _as_set(graph, F):
    F = np.unique(np.asarray(list(F), dtype=np.int64))
    if len(F) == 0:
        raise GraphError("F must be non-empty")
    if F.min() < 0 or F.max() >= graph.n:
        raise GraphError("F contains vertices outside the window")
    return F


def last_exit_residual(oracle: GreenOracle, F):
    """``max_y |sum_x g(y,x) e_F(x) - u_F(y)|`` from independent solves."""
    eq = equilibrium_measure(oracle.graph, F)
    lhs = oracle.columns(eq.support) @ eq.weights[eq.support]
    return float(np.max(np.abs(lhs - eq.hitting)))


def green_profile(oracle: GreenOracle, centers, Ls):
    """``g(L)`` (sup of g over probed pairs at distance >= L) and ``b(L)``."""
    from .graph import ball, bfs_distances

    graph = oracle.graph
    Ls = np.asarray(sorted(Ls))
    gL = np.zeros(len(Ls))
    bL = np.zeros(len(Ls), dtype=np.int64)
    for c in centers:
        dist = bfs_distances(graph, c)
        col = oracle.column(c)
        for i, L in enumerate(Ls):
            far = dist >= L
            if far.any():
                gL[i] = max(gL[i], float(col[far].max()))
            bL[i] = max(bL[i], len(ball(graph, c, int(L))[1]))
    gL = np.maximum.accumulate(gL[::-1])[::-1]
    return ProfileReport(Ls, gL, bL)


# ------------------------------------------------------------------ 2D kernel
def a_asymptotic(z):
    """Asymptotic expansion of the Z^2 potential kernel (valid for large |z|)."""
    z = np.asarray(z, dtype=float)
    x, y = z[..., 0], z[..., 1]
    r2 = x * x + y * y
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(r2) / np.pi + A_CONST - (x ** 4 - 6 * x * x * y * y + y ** 4) / (6 * np.pi * r2 ** 3)
    return np.where(r2 == 0, 0.0, out)


@dataclass
class PotentialKernel:
    """Potential kernel values on the box ``|x|_inf <= radius`` of Z^2."""

    radius: int
    grid: np.ndarray
    residual: float

    def __call__(self, points):
        pts = np.asarray(points, dtype=np.int64)
        scalar = pts.ndim == 1
        pts = pts.reshape(-1, 2)
        R = self.radius
        inside = np.all(np.abs(pts) <= R, axis=1)
        out = a_asymptotic(pts)
        if inside.any():
            p = pts[inside] + R
            out[inside] = self.grid[p[:, 0], p[:, 1]]
        return float(out[0]) if scalar else out

    def green_z20(self, p, q):
        """Infinite-volume Green function of Z^{2,0}: a(p) + a(q) - a(p - q)."""
        p, q = np.asarray(p), np.asarray(q)
        return self(p) + self(q) - self(p - q)


def potential_kernel_z2(radius: int) -> PotentialKernel:
    """Solve for ``a`` with ``a(0) = 0``, harmonic off 0, asymptotic boundary values."""
    if radius < 2:
        raise ValueError("radius must be >= 2")
    R = radius
    side = 2 * R + 1
    ii, jj = np.meshgrid(np.arange(side) - R, np.arange(side) - R, indexing="ij")
    pts = np.stack([ii, jj], axis=-1)
    bnd = (np.abs(ii) == R) | (np.abs(jj) == R)
    origin = (ii == 0) & (jj == 0)
    free = ~bnd & ~origin
    vals = np.zeros((side, side))
    vals[bnd] = a_asymptotic(pts[bnd])
    idx = -np.ones((side, side), dtype=np.int64)
    nfree = int(free.sum())
    idx[free] = np.arange(nfree)
    rows, cols, data = [np.arange(nfree)], [np.arange(nfree)], [np.full(nfree, 4.0)]
    rhs = np.zeros(nfree)
    fi, fj = np.nonzero(free)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = fi + di, fj + dj
        k = idx[ni, nj]
        inner = k >= 0
        rows.append(idx[fi, fj][inner])
        cols.append(k[inner])
        data.append(-np.ones(inner.sum()))
        np.add.at(rhs, idx[fi, fj][~inner], vals[ni[~inner], nj[~inner]])
    A = sp.csc_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(nfree, nfree))
    vals[free] = spla.spsolve(A, rhs)
    lap = np.zeros_like(vals)
    lap[1:-1, 1:-1] = 0.25 * (vals[2:, 1:-1] + vals[:-2, 1:-1] + vals[1:-1, 2:] + vals[1:-1, :-2]) - vals[1:-1, 1:-1]
    interior = free.copy()
    res = float(np.max(np.abs(lap[interior])))
    return PotentialKernel(R, vals, res)


def potential_kernel_oracle(point, sizes=(32, 64, 128)):
    """``a(x)`` as the limit of half the pinned variance on killed boxes.

    ``(g_n(x,x) - 2 g_n(x,0) + g_n(0,0)) / 2`` on boxes of half-width ``n``
    converges to ``a(x)`` with an ``O(n^-2)`` error, removed by Richardson
    extrapolation over the nested sizes.

    Returns
    -------
    value : float
        Extrapolated limit.
    error : float
        Difference between the two highest-order extrapolants.
    raw : list of float
    """
    from .graph import grid

    raw = []
    for n in sizes:
        g = grid(2, n, kappa=0.0, weight=0.25, boundary="window")
        o = GreenOracle(g)
        x, z = g.vertex_of(point), g.vertex_of((0, 0))
        cx, cz = o.column(x), o.column(z)
        raw.append(0.5 * (cx[x] - 2 * cx[z] + cz[z]))
    raw = np.asarray(raw)
    h2 = 1.0 / np.asarray(sizes, dtype=float) ** 2
    # Polynomial extrapolation in n^-2 to n = infinity.
    coef = np.polyfit(h2, raw, len(sizes) - 1)
    val = float(np.polyval(coef, 0.0))
    coef2 = np.polyfit(h2[1:], raw[1:], 1)
    err = abs(val - float(np.polyval(coef2, 0.0)))
    return val, err, raw.tolist()


@dataclass
class Capacity2D:
    value: float
    window_values: list
    radii: list
    stable: bool


def capacity_2d(A, radius: int = 64, check_radii=(64, 128), tol=0.02):
    """Two-dimensional capacity of a finite ``A`` containing the origin.

    The capacity of ``A minus {0}`` on the Doob graph of ``Z^{2,0}`` with
    ``h = a``.  Its Green function is ``(a(x)+a(y)-a(x-y)) / (a(x) a(y))`` in
    infinite volume, so the capacity is ``1^T G_K^{-1} 1`` on ``K = A \\ {0}``;
    the potential kernel comes from a window of the given radius and the value
    is recomputed for each radius in ``check_radii`` to confirm stability.
    """
    pts = [tuple(int(c) for c in p) for p in A]
    if (0, 0) not in pts:
        raise ValueError("A must contain the origin")
    K = np.array(sorted({p for p in pts if p != (0, 0)}), dtype=np.int64).reshape(-1, 2)
    if len(K) == 0:
        return Capacity2D(0.0, [0.0], [radius], True)
    radii = sorted(set(check_radii) | {radius})
    vals = []
    for r in radii:
        a = potential_kernel_z2(r)
        aK = a(K)
        G = (aK[:, None] + aK[None, :] - a((K[:, None, :] - K[None, :, :]).reshape(-1, 2)).reshape(len(K), len(K)))
        G = G / np.outer(aK, aK)
        vals.append(float(np.sum(np.linalg.solve(G, np.ones(len(K))))))
    value = vals[radii.index(radius)]
    stable = max(vals) - min(vals) <= tol * abs(value)
    return Capacity2D(value, vals, radii, stable)
