"""Doob transforms of weighted graphs by positive harmonic functions.

For ``h > 0`` harmonic (``kappa_x h(dI_x) + sum_y lambda_xy h(y) = lambda_x h(x)``)
the transform has weights ``h(x) h(y) lambda_xy`` and killing
``kappa_x h(x) h(dI_x)``; window leak transforms like killing with the
boundary-end values of ``h``.  Along a cable ``h`` is linear, which fixes the
coordinate map ``psi_h`` and all trace-level identities checked here.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import CableCoordinate, GraphError, WeightedGraph
from .potential import GreenOracle, HarmonicFn, kill_probability, potential_kernel_z2

logger = logging.getLogger(__name__)

TOL_NUMERIC = 1e-8
TOL_EXACT = 1e-12


class NotHarmonic(ValueError):
    """Raised when a Doob transform is requested for a non-harmonic ``h``."""

    def __init__(self, msg, certificate):
        super().__init__(msg)
        self.certificate = certificate


@dataclass
class HarmonicCertificate:
    max_residual: float
    residuals: np.ndarray
    unchecked: np.ndarray
    tol: float
    passed: bool


@dataclass(frozen=True)
class DoobGraph:
    base: WeightedGraph
    h: HarmonicFn
    graph: WeightedGraph
    certificate: HarmonicCertificate

    def psi(self, p: CableCoordinate) -> CableCoordinate:
        return psi_h(self, p)


@dataclass
class SkeletonReport:
    """Empirical versus analytic slot frequencies of the transformed chain."""

    vertices: np.ndarray
    targets: np.ndarray
    expected: np.ndarray
    observed: np.ndarray
    trials: np.ndarray
    z: np.ndarray
    max_z: float
    row_sums: np.ndarray
    passed: bool
    extra: dict = field(default_factory=dict)


# ------------------------------------------------------------------ harmonics
def check_harmonic(graph: WeightedGraph, h: HarmonicFn, tol=TOL_NUMERIC) -> HarmonicCertificate:
    """Harmonicity residuals of ``h`` at every vertex.

    Vertices with window leak are reported as unchecked unless ``h`` carries
    boundary-end values.
    """
    v = np.asarray(h.values, dtype=float)
    if v.shape != (graph.n,):
        raise GraphError("h has %d values for %d vertices" % (v.size, graph.n))
    if np.any(~(v > 0)):
        raise GraphError("h must be strictly positive on vertices (min %.3g)" % np.nanmin(v))
    c = np.asarray(h.cable_end, dtype=float)
    killed = graph.kappa > 0
    if c.shape != (graph.n,) or np.any(np.isnan(c[killed])):
        raise GraphError("h(dI_x) missing at a killed vertex")
    W = graph.weight_matrix()
    res = np.where(killed, graph.kappa * np.nan_to_num(c), 0.0) + W @ v - graph.lam * v
    unchecked = np.zeros(graph.n, dtype=bool)
    if h.boundary_end is None:
        unchecked = graph.leak > 0
    else:
        res = res + graph.leak * h.boundary_end
    res = np.abs(res)
    res[unchecked] = np.nan
    mx = float(np.nanmax(res)) if (~unchecked).any() else 0.0
    return HarmonicCertificate(mx, res, np.nonzero(unchecked)[0], tol, mx <= tol)


def doob_graph(graph: WeightedGraph, h: HarmonicFn, tol=TOL_NUMERIC) -> DoobGraph:
    """Doob transform ``G_h``; refuses non-harmonic ``h``.

    Where the boundary is unchecked, the transformed leak is the value that
    makes ``lambda^h_x = h(x)^2 lambda_x`` hold, which amounts to imposing
    the boundary-end value of ``h`` implied by harmonicity.
    """
    cert = check_harmonic(graph, h, tol)
    if not cert.passed:
        raise NotHarmonic("h is not harmonic: max residual %.3g > %.3g" % (cert.max_residual, tol), cert)
    v = h.values
    e = graph.edges
    w = graph.weights * v[e[:, 0]] * v[e[:, 1]]
    kap = np.where(graph.kappa > 0, graph.kappa * v * np.nan_to_num(h.cable_end), 0.0)
    inner = np.bincount(e[:, 0], w, graph.n) + np.bincount(e[:, 1], w, graph.n) + kap
    target = v * v * graph.lam
    if h.boundary_end is None:
        leak = np.where(graph.leak > 0, target - inner, 0.0)
        if np.any(leak < -1e-12 * target):
            raise NotHarmonic("implied boundary values of h are negative", cert)
        leak = np.maximum(leak, 0.0)
    else:
        leak = graph.leak * v * h.boundary_end
    drift = np.abs(inner + leak - target)
    if np.any(drift - v * np.nan_to_num(cert.residuals) > 1e-10 * np.maximum(1.0, target)):
        raise NotHarmonic("vertex identity fails: %.3g" % float(np.max(drift)), cert)
    meta = dict(graph.meta, doob=h.name)
    gh = WeightedGraph(graph.n, e, w, kap, leak, graph.coords, meta)
    return DoobGraph(graph, h, gh, cert)


def _h_at(doob, carrier_kind, carrier, anchor, offset):
    g = doob.base
    v = doob.h.values
    if carrier_kind == "edge":
        x, y = g.edges[carrier]
        other = y if anchor == x else x
        lam = g.weights[carrier]
        return 2 * offset * lam * v[other] + (1 - 2 * offset * lam) * v[anchor]
    kap = g.kappa[carrier]
    return 2 * offset * kap * doob.h.cable_end[carrier] + (1 - 2 * offset * kap) * v[carrier]


def psi_h(doob: DoobGraph, p: CableCoordinate) -> CableCoordinate:
    """Image of a cable point under ``t -> t / (h(x) h(x + t I))``.

    For edge points the image is computed from both anchors; their
    disagreement must be below 1e-12 relative to the image cable length.
    """
    g = doob.base
    v = doob.h.values
    if p.kind == "vertex":
        return p
    t = float(p.offset)
    hp = _h_at(doob, p.kind, p.carrier, p.anchor, t)
    img = t / (v[p.anchor] * hp) if t > 0 else 0.0
    if p.kind == "edge":
        x, y = g.edges[p.carrier]
        other = y if p.anchor == x else x
        rho = g.rho[p.carrier]
        rho_h = rho / (v[x] * v[y])
        img_other = (rho - t) / (v[other] * hp)
        if abs(img + img_other - rho_h) > 1e-12 * max(1.0, rho_h):
            raise AssertionError("psi_h anchors disagree: %.3g" % abs(img + img_other - rho_h))
    return CableCoordinate(p.kind, p.carrier, p.anchor, img)


# ----------------------------------------------------------------- identities
def verify_green_relation(doob: DoobGraph, probes=None):
    """``max |h(x) h(y) g_h(x,y) - g(x,y)|`` over probe pairs (all pairs if None)."""
    G = GreenOracle(doob.base)
    Gh = GreenOracle(doob.graph)
    v = doob.h.values
    if probes is None:
        ids = np.arange(doob.base.n)
        A = G.matrix(ids)
        B = Gh.matrix(ids)
        return float(np.max(np.abs(np.outer(v, v) * B - A)))
    err = 0.0
    for x, y in probes:
        err = max(err, abs(v[x] * v[y] * Gh.g(x, y) - G.g(x, y)))
    return float(err)


def local_time_pullback(doob: DoobGraph, ell):
    """Local times on the base graph from local times on ``G_h``: ``h(x)^2 ell_x``."""
    ell = np.asarray(ell, dtype=float)
    return ell * doob.h.values ** 2


def pullback_mean(doob: DoobGraph, u):
    """Mean pulled-back local time of the killed soup on ``G_h`` at level ``u``.

    Equals ``u h(x) sum_y g(x,y) kappa_y h(dI_y)`` on the base graph.
    """
    c = np.where(doob.base.kappa > 0, np.nan_to_num(doob.h.cable_end), 0.0)
    G = GreenOracle(doob.base)
    return u * doob.h.values * G.factor.solve(doob.base.kappa * c)


def conditioned_skeleton_check(graph: WeightedGraph, n_samples: int, seed: int, walks_from=None,
                               zmax=3.0) -> SkeletonReport:
    """Skeleton of the walk on ``G_{h_kill}`` against the conditioned kernel.

    ``h_kill`` counts window escape as survival, so it lies in ``(0, 1)``
    when the window has interior killing and leak.
    """
    from .walks import KILLED, count_transitions, transition_table

    hk, _ = kill_probability(graph, "survives")
    if np.any(hk.values <= 0) or np.any(hk.values >= 1):
        raise GraphError("h_kill must lie strictly in (0,1) on the window")
    dg = doob_graph(graph, hk)
    tab = transition_table(dg.graph)
    starts = np.full(n_samples, 0 if walks_from is None else int(walks_from), dtype=np.int64)
    slots = np.zeros(len(tab.target), dtype=np.int64)
    count_transitions(tab.indptr, tab.target, tab.cum, starts, np.uint32(seed % 2 ** 32), slots, 10 ** 7)
    verts, targets, expct, obs, trials, row_sum = [], [], [], [], [], []
    h = hk.values
    W = graph.weight_matrix().tocsr()
    for x in range(graph.n):
        lo, hi = tab.indptr[x], tab.indptr[x + 1]
        tot = int(slots[lo:hi].sum())
        s = 0.0
        for k in range(lo, hi):
            y = tab.target[k]
            if y >= 0:
                p = graph.lam[x] ** -1 * W[x, y] * h[y] / h[x]
            elif y == KILLED:
                p = graph.kappa[x] / graph.lam[x] / h[x]
            else:
                p = 0.0
            s += p
            verts.append(x)
            targets.append(y)
            expct.append(p)
            obs.append(slots[k])
            trials.append(tot)
        row_sum.append(s)
    expct = np.array(expct)
    obs = np.array(obs, dtype=float)
    trials = np.array(trials, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.sqrt(trials * expct * (1 - expct))
        se = np.where(se > 1e-6 * np.sqrt(np.maximum(trials, 1.0)), se, 0.0)
        exact = np.abs(obs - trials * expct) <= 1e-9 * np.maximum(trials, 1.0)
        z = np.where(se > 0, (obs - trials * expct) / np.where(se > 0, se, 1.0), np.where(exact, 0.0, np.inf))
    z[trials == 0] = 0.0
    kill_after = kill_probability(dg.graph, "survives")[0].values
    extra = {"h_kill_transformed_min": float(kill_after.min()),
             "h_kill": h.copy()}
    mz = float(np.max(np.abs(z)))
    passed = mz <= zmax and np.allclose(row_sum, 1.0, atol=1e-12)
    return SkeletonReport(np.array(verts), np.array(targets), expct, obs, trials, z, mz,
                          np.array(row_sum), passed, extra)


# ----------------------------------------------------------------- 2D kernel
def z20_harmonic(graph: WeightedGraph, kernel=None) -> HarmonicFn:
    """Potential kernel ``a`` on a ``z2-pinned`` window as a harmonic function.

    Killing cables lead to the removed origin (``a = 0`` there); each leak
    carries the mean of ``a`` over the cut neighbours.
    """
    if graph.meta.get("family") != "z2-pinned":
        raise GraphError("expected a z2-pinned window")
    R = int(graph.meta["radius"])
    a = kernel or potential_kernel_z2(R + 1)
    pts = np.asarray(graph.coords)
    vals = a(pts)
    bnd = np.full(graph.n, np.nan)
    for i in np.nonzero(graph.leak > 0)[0]:
        out = []
        for d in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            q = pts[i] + d
            if np.max(np.abs(q)) > R:
                out.append(a(q))
        bnd[i] = float(np.mean(out))
    return HarmonicFn(vals, np.zeros(graph.n), np.nan_to_num(bnd), name="a")


# ---------------------------------------------------------------------- I/O
def write_harmonic_csv(path, h: HarmonicFn):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_id", "value", "cable_end_value"])
        for i, (v, c) in enumerate(zip(h.values, h.cable_end)):
            w.writerow([i, "%.12g" % v, "%.12g" % c])


def read_harmonic_csv(path, name="h") -> HarmonicFn:
    vals, ends = [], []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if [c.strip() for c in header[:3]] != ["vertex_id", "value", "cable_end_value"]:
            raise GraphError("bad harmonic CSV header %r" % header)
        for k, row in enumerate(rows):
            if int(row[0]) != k:
                raise GraphError("vertex ids must be 0..n-1 in order")
            vals.append(float(row[1]))
            ends.append(float(row[2]))
    return HarmonicFn(np.array(vals), np.array(ends), None, name=name)
