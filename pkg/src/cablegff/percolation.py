"""Level-set and interlacement percolation on windows and lazily explored trees.

Connection probabilities for a whole grid of levels come from one coupled
sample per replica.  Given the vertex field, the minimum of the cable field
on edge ``e`` is

    t_e = (phi_x + phi_y)/2 - sqrt(((phi_x - phi_y)/2)^2 + rho_e E_e),   E_e ~ Exp(1),

so ``e`` is open at level ``h`` iff ``t_e >= h``.  Adding edges by decreasing
``t`` (a maximum spanning forest) gives, for every radius ``L``, the largest
level ``H_L`` at which ``x`` is connected to ``dB(x, L)``.  Then
``P(x <-> dB(x, L) in E^{>=h}) = P(H_L >= h)``, which is non-increasing in ``h``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import stats
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import rng as rngmod
from . import walks
from .gff import EdgeOpenness, generation_recursion, sample_discrete_gff
from .graph import GraphError, GraphSpec, LevelTree, WeightedGraph, bfs_distances, build_graph, level_tree
from .interlacements import killed_setup
from .linalg import PrecisionFactor
from .potential import HarmonicFn

logger = logging.getLogger(__name__)

THETA = 0.05
PHI_BAR_1 = float(stats.norm.sf(1.0))
C_BAR = 1.0 / PHI_BAR_1
NEG_INF = -np.inf


# ------------------------------------------------------------------- types
@dataclass
class ClusterLabeling:
    labels: np.ndarray
    sizes: np.ndarray

    def cluster_of(self, x):
        if self.labels[x] < 0:
            return np.zeros(0, dtype=np.int64)
        return np.nonzero(self.labels == self.labels[x])[0]


@dataclass
class ConnectionEstimate:
    h: float
    L: int
    estimate: float
    ci_lo: float
    ci_hi: float
    N: int
    hits: int


@dataclass
class ScanResult:
    hs: np.ndarray
    Ls: list
    table: dict
    bracket: tuple
    L_max: int
    monotone: bool
    theta: float = THETA
    sensitivity: dict = field(default_factory=dict)


@dataclass
class GWReport:
    generations: np.ndarray
    analytic: np.ndarray
    mc: np.ndarray
    mc_se: np.ndarray
    supercritical: bool
    extra: dict = field(default_factory=dict)


@dataclass
class DecayFit:
    rate: float
    intercept: float
    r2: float
    outcome: str


@dataclass
class ExplorationResult:
    successes: int
    N: int
    budget_hits: int
    frequency: float
    ci: tuple
    start_generation: int
    generations: int
    nodes: np.ndarray


# ----------------------------------------------------------------- clusters
def clusters(openness: EdgeOpenness, graph: WeightedGraph, values, level=None, weight: HarmonicFn = None):
    """Components of the open subgraph on vertices above the level (others get label -1)."""
    level = openness.level if level is None else level
    thr = np.full(graph.n, level) if weight is None else level * weight.values
    above = np.asarray(values) >= thr
    op = np.asarray(openness.open, dtype=bool)
    e = graph.edges[op]
    e = e[above[e[:, 0]] & above[e[:, 1]]]
    A = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(graph.n, graph.n))
    _, lab = connected_components(A, directed=False)
    labels = np.where(above, lab, -1)
    _, inv, sizes = np.unique(labels[above], return_inverse=True, return_counts=True)
    out = -np.ones(graph.n, dtype=np.int64)
    out[above] = inv
    return ClusterLabeling(out, sizes)


# ----------------------------------------------------------- coupled levels
def edge_thresholds(values, graph: WeightedGraph, E, weight: HarmonicFn = None, edges=None):
    """Largest level at which each edge is open (vectorized over replicas).

    With a weight ``h`` the edge is open at level ``t`` iff the bridge stays
    above ``t h``; ``t`` is the smaller root of
    ``(phi_x - t h_x)(phi_y - t h_y) = rho E``.
    """
    ids = np.arange(graph.m) if edges is None else np.asarray(edges)
    e = graph.edges[ids]
    px, py = values[..., e[:, 0]], values[..., e[:, 1]]
    rho = graph.rho[ids]
    if weight is None:
        return 0.5 * (px + py) - np.sqrt(0.25 * (px - py) ** 2 + rho * E)
    hx, hy = weight.values[e[:, 0]], weight.values[e[:, 1]]
    disc = (px * hy - py * hx) ** 2 + 4 * hx * hy * rho * E
    return ((px * hy + py * hx) - np.sqrt(disc)) / (2 * hx * hy)


@nb.njit(cache=True)
def _find(par, a):
    while par[a] != a:
        par[a] = par[par[a]]
        a = par[a]
    return a


@nb.njit(cache=True)
def reach_levels(eu, ev, t, x, dist, Ls, out):
    """Max-spanning-forest reach: ``out[k]`` = largest level joining ``x`` to ``dist >= Ls[k]``."""
    V = len(dist)
    par = np.arange(V)
    far = dist.copy()
    order = np.argsort(-t)
    k = 0
    while k < len(Ls) and dist[x] >= Ls[k]:
        out[k] = np.inf
        k += 1
    for i in order:
        if k >= len(Ls):
            break
        a = _find(par, eu[i])
        b = _find(par, ev[i])
        if a == b:
            continue
        par[b] = a
        if far[b] > far[a]:
            far[a] = far[b]
        r = _find(par, x)
        while k < len(Ls) and far[r] >= Ls[k]:
            out[k] = t[i]
            k += 1
    while k < len(Ls):
        out[k] = -np.inf
        k += 1


@nb.njit(cache=True)
def reach_open(eu, ev, open_, x, dist, Lmax, V):
    """Farthest distance from ``x`` inside its cluster of open edges (−1 if isolated and unvisited)."""
    par = np.arange(V)
    far = dist.copy()
    for i in range(len(eu)):
        if open_[i]:
            a = _find(par, eu[i])
            b = _find(par, ev[i])
            if a != b:
                par[b] = a
                if far[b] > far[a]:
                    far[a] = far[b]
    return far[_find(par, x)]


def _ball_edges(graph, x, Lmax):
    dist = bfs_distances(graph, x)
    dist = np.where(dist < 0, np.iinfo(np.int64).max // 2, dist)
    e = graph.edges
    keep = np.minimum(dist[e[:, 0]], dist[e[:, 1]]) < Lmax
    return np.nonzero(keep)[0], dist


def reach_samples(graph: WeightedGraph, x: int, Ls, N: int, seed: int, weight: HarmonicFn = None,
                  block: int = rngmod.BLOCK, factor=None):
    """Per-replica ``H_L`` for the GFF level sets: array of shape ``(N, len(Ls))``."""
    Ls = np.asarray(sorted(Ls), dtype=np.int64)
    eids, dist = _ball_edges(graph, x, int(Ls.max()))
    eu = graph.edges[eids, 0].copy()
    ev = graph.edges[eids, 1].copy()
    fac = factor or PrecisionFactor(graph.precision())
    H = np.empty((N, len(Ls)))
    for r0 in range(0, N, block):
        r1 = min(N, r0 + block)
        phi = sample_discrete_gff(graph, r1 - r0, seed, r0=r0, factor=fac).values
        U = rngmod.block_draws(seed, rngmod.THRESH, r0, r1, graph.m, kind="uniform")[:, eids]
        E = -np.log1p(-U)
        T = edge_thresholds(phi, graph, E, weight, eids)
        out = np.empty(len(Ls))
        for i in range(r1 - r0):
            reach_levels(eu, ev, T[i], x, dist, Ls, out)
            H[r0 + i] = out
    return H


def wilson(k, n, conf=0.95):
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=conf, method="wilson")
    return float(ci.low), float(ci.high)


def _estimate(hits, N, h, L):
    lo, hi = wilson(hits, N)
    return ConnectionEstimate(float(h), int(L), hits / N, lo, hi, int(N), int(hits))


def _window(graph, L, margin=None):
    if isinstance(graph, GraphSpec):
        R = graph.get("radius")
        need = int(np.ceil(L + (L / 2 if margin is None else margin)))
        if R is None:
            graph = graph.with_params(radius=need)
        elif R < need:
            logger.warning("window radius %d below L + margin = %d", R, need)
        return build_graph(graph)
    return graph


def _vid(graph, x):
    if isinstance(x, (tuple, list, np.ndarray)):
        return graph.vertex_of(x)
    return int(x)


def connection_prob(graph, x, L: int, h: float, N: int, seed: int, weight: HarmonicFn = None,
                    margin=None) -> ConnectionEstimate:
    """Monte Carlo ``P(x <-> dB(x, L) in E^{>=h})`` with a Wilson interval."""
    if N < 100:
        raise ValueError("N >= 100 required for a meaningful interval")
    g = _window(graph, L, margin)
    H = reach_samples(g, _vid(g, x), [L], N, seed, weight)
    return _estimate(int(np.sum(H[:, 0] >= h)), N, h, L)


def scan_levels(graph, x, Ls, hs, N: int, seed: int, weight: HarmonicFn = None, theta=THETA,
                margin=None) -> ScanResult:
    """Connection estimates on an ``(h, L)`` grid and the crossing bracket of ``theta``.

    The bracket is ``[h_lo, h_hi]`` with ``h_lo`` the largest level whose lower
    confidence bound exceeds ``theta`` and ``h_hi`` the smallest level whose upper
    bound lies below ``theta``, both at the largest ``L``.
    """
    hs = np.asarray(hs, dtype=float)
    if np.any(np.diff(hs) <= 0):
        raise ValueError("h grid must be strictly increasing")
    if N < 100:
        raise ValueError("N >= 100 required for a meaningful interval")
    Ls = sorted(int(L) for L in Ls)
    g = _window(graph, Ls[-1], margin)
    H = reach_samples(g, _vid(g, x), Ls, N, seed, weight)
    table = {}
    for j, L in enumerate(Ls):
        for h in hs:
            table[(float(h), L)] = _estimate(int(np.sum(H[:, j] >= h)), N, h, L)
    bracket = _bracket(table, hs, Ls[-1], theta)
    est = np.array([[table[(float(h), L)].estimate for h in hs] for L in Ls])
    monotone = bool(np.all(np.diff(est, axis=1) <= 0) and np.all(np.diff(est, axis=0) <= 0))
    sens = {th: _bracket(table, hs, Ls[-1], th) for th in (theta / 2, 2 * theta)}
    return ScanResult(hs, Ls, table, bracket, Ls[-1], monotone, theta, sens)


def _bracket(table, hs, L, theta):
    if len(hs) == 1:
        return float(hs[0]), float(hs[0])
    lo = [h for h in hs if table[(float(h), L)].ci_lo > theta]
    hi = [h for h in hs if table[(float(h), L)].ci_hi < theta]
    h_lo = float(max(lo)) if lo else -np.inf
    h_hi = float(min(hi)) if hi else np.inf
    return h_lo, h_hi


def interlacement_connection(graph: WeightedGraph, x, L: int, u: float, N: int, seed: int):
    """``P(x <-> dB(x, L) in I^u)`` for the killed soup (range = visited vertices and crossed edges)."""
    x = _vid(graph, x)
    st = killed_setup(graph)
    dist = bfs_distances(graph, x)
    dist = np.where(dist < 0, np.iinfo(np.int64).max // 2, dist)
    f = st.fwd
    slot_edge = _slot_edges(graph, f)
    hits = 0
    for r0 in range(0, N, rngmod.BLOCK):
        r1 = min(N, r0 + rngmod.BLOCK)
        seeds = rngmod.replica_seeds(seed, rngmod.SOUP, r0, r1)
        crossed = np.zeros((r1 - r0, graph.m), dtype=np.bool_)
        visited = np.zeros((r1 - r0, graph.n), dtype=np.bool_)
        _soup_range(f.indptr, f.target, f.cum, slot_edge, st.src, st.src_rate, st.src_key, float(u), seeds,
                    crossed, visited)
        eu, ev = graph.edges[:, 0].copy(), graph.edges[:, 1].copy()
        for i in range(r1 - r0):
            if not visited[i, x]:
                continue
            if reach_open(eu, ev, crossed[i], x, dist, L, graph.n) >= L:
                hits += 1
    return _estimate(hits, N, float("nan"), L)


def _slot_edges(graph, table):
    out = -np.ones(len(table.target), dtype=np.int64)
    for x in range(graph.n):
        for k in range(table.indptr[x], table.indptr[x + 1]):
            y = table.target[k]
            if y >= 0:
                out[k] = graph.edge_index(x, int(y))
    return out


@nb.njit(cache=True)
def _soup_range(indptr, target, cum, slot_edge, src, src_rate, src_key, u, rep_seeds, crossed, visited):
    for r in range(len(rep_seeds)):
        for s in range(len(src)):
            np.random.seed(walks.mix_seed(rep_seeds[r], src_key[s]))
            k = np.random.poisson(u * src_rate[s])
            for j in range(k):
                np.random.random()
                x = src[s]
                while True:
                    visited[r, x] = True
                    np.random.exponential(1.0)
                    q = np.random.random()
                    i = indptr[x]
                    hi = indptr[x + 1] - 1
                    while i < hi and q >= cum[i]:
                        i += 1
                    y = target[i]
                    if y < 0:
                        break
                    crossed[r, slot_edge[i]] = True
                    x = y


# ---------------------------------------------------------------- GW means
def gw_analytic(tree: LevelTree, u: float, generations):
    """Mean number of children reached by first steps of killed trajectories."""
    out = []
    for n in generations:
        lam = tree.lam(n)
        out.append(tree.children(n) * -np.expm1(-u * tree.weight(n) * tree.kappa(n) / lam))
    return np.array(out)


def growth_condition_mean(d: int, alpha: float):
    """``d (1 - exp(-sqrt(alpha)/(d alpha + 1)))`` and its product with ``P(Y >= 1)``."""
    base = d * -np.expm1(-np.sqrt(alpha) / (d * alpha + 1))
    return base, base * PHI_BAR_1


def gw_offspring_mean(spec: GraphSpec, u: float, generations, N: int, seed: int) -> GWReport:
    """Analytic offspring means against killed-soup Monte Carlo on a materialized window.

    The Monte Carlo count at ``x`` is the number of distinct children that are
    the first step of some soup trajectory started at ``x``.
    """
    from .interlacements import sample_killed_soup

    tree = level_tree(spec)
    gens = np.asarray(sorted(generations), dtype=np.int64)
    analytic = gw_analytic(tree, u, gens)
    g = tree.materialize(int(gens.max()) + 1)
    gen = np.asarray(g.meta["generation"])
    parent = np.asarray(g.meta["parent"])
    st = killed_setup(g)
    sums = {int(n): [] for n in gens}
    for r in range(N):
        soup = sample_killed_soup(g, u, seed, replica=r, setup=st)
        first = {}
        for tr in soup.trajectories:
            if len(tr.forward) > 1:
                first.setdefault(tr.start, set()).add(int(tr.forward[1]))
        for n in gens:
            xs = np.nonzero(gen == n)[0]
            cnt = [sum(1 for y in first.get(int(x), ()) if parent[y] == x) for x in xs]
            sums[int(n)].append(np.mean(cnt))
    mc = np.array([np.mean(sums[int(n)]) for n in gens])
    se = np.array([np.std(sums[int(n)], ddof=1) / np.sqrt(N) if N > 1 else np.nan for n in gens])
    ex = {}
    if spec.family == "geometric-tree":
        base, mean = growth_condition_mean(int(spec.get("d")), float(spec.get("alpha")))
        ex = {"growth_base": base, "growth_condition_mean": mean, "C_bar": C_BAR, "growth_condition_holds": base > C_BAR}
    sup = bool(np.any(analytic > 1.0))
    return GWReport(gens, analytic, mc, se, sup, ex)


# --------------------------------------------------------------- decay fit
def decay_fit(Ls, estimates, ci=None) -> DecayFit:
    """Weighted least-squares fit of ``log p(L) = b - c L``."""
    Ls = np.asarray(Ls, dtype=float)
    p = np.asarray(estimates, dtype=float)
    if len(Ls) < 3:
        raise ValueError("need at least 3 radii")
    if np.all(p <= 0):
        return DecayFit(np.inf, np.nan, np.nan, "decay too fast to fit")
    ok = p > 0
    y = np.log(p[ok])
    x = Ls[ok]
    if ci is not None:
        lo, hi = np.asarray(ci, dtype=float).T
        sig = np.maximum((hi[ok] - lo[ok]) / (2 * 1.96 * p[ok]), 1e-12)
        w = 1.0 / sig ** 2
    else:
        w = np.ones_like(y)
    if ok.sum() < 2:
        return DecayFit(np.inf, np.nan, np.nan, "decay too fast to fit")
    X = np.stack([np.ones_like(x), -x], axis=1)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    b, c = coef
    yhat = X @ coef
    ybar = np.sum(w * y) / np.sum(w)
    ss_tot = np.sum(w * (y - ybar) ** 2)
    ss_res = np.sum(w * (y - yhat) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-20 else 0.0)
    outcome = "decaying" if c > 1e-6 else "non-decaying"
    return DecayFit(float(c), float(b), float(r2), outcome)


# ---------------------------------------------------------- tree explorers
def _ancestral_field(q, g, n0, rng):
    phi = np.sqrt(g[0]) * rng.standard_normal()
    for n in range(1, n0 + 1):
        phi = q[n] * phi + np.sqrt(g[n]) * rng.standard_normal()
    return phi


def explore_level_tree(tree: LevelTree, h: float, start_generation: int, generations: int, N: int, seed: int,
                       budget: int = 10 ** 6) -> ExplorationResult:
    """Depth-first exploration of ``E^{>=h}`` below a generation-``n0`` vertex.

    The field is generated lazily by the parent-to-child recursion; only
    descendants of the start vertex are explored, so the reach frequency is a
    lower bound for the cluster.  A replica succeeds when some explored
    vertex lies ``generations`` below the start.
    """
    n0, depth = int(start_generation), int(generations)
    q, g, lam = generation_recursion(tree, n0 + depth + 1)
    rho = np.array([1.0 / (2.0 * tree.weight(n)) for n in range(n0 + depth + 1)])
    succ = nbud = 0
    nodes = np.zeros(N, dtype=np.int64)
    for r in range(N):
        rng = rngmod.block_generator(seed, rngmod.EXPLORE, r)
        phi0 = _ancestral_field(q, g, n0, rng)
        if phi0 < h:
            continue
        stack = [(phi0, 0)]
        used = 0
        ok = False
        while stack:
            phi, k = stack.pop()
            if k == depth:
                ok = True
                break
            n = n0 + k
            c = tree.children(n)
            if used + c > budget:
                nbud += 1
                break
            used += c
            kids = q[n + 1] * phi + np.sqrt(g[n + 1]) * rng.standard_normal(c)
            a, b = phi - h, kids - h
            p = np.where(b > 0, -np.expm1(-a * np.clip(b, 0, None) / rho[n]), 0.0)
            open_ = rng.random(c) < p
            for v in kids[open_][::-1]:
                stack.append((float(v), k + 1))
        nodes[r] = used
        succ += ok
    lo, hi = wilson(succ, N)
    return ExplorationResult(succ, N, nbud, succ / N, (lo, hi), n0, depth, nodes)


def explore_interlacement_tree(tree: LevelTree, u: float, start_generation: int, generations: int, N: int,
                               seed: int, budget: int = 10 ** 6) -> ExplorationResult:
    """Branching lower bound for the killed-soup range below a generation-``n0`` vertex.

    A child ``y`` of an explored vertex ``x`` is added when some of the
    ``Poisson(u kappa_x)`` trajectories started at ``x`` jumps to ``y`` first.
    These children are in the cluster of ``x`` in ``I^u``, so the reach
    frequency bounds the true one from below.
    """
    n0, depth = int(start_generation), int(generations)
    succ = nbud = 0
    nodes = np.zeros(N, dtype=np.int64)
    for r in range(N):
        rng = rngmod.block_generator(seed, rngmod.EXPLORE, r)
        stack = [0]
        used = 0
        ok = False
        while stack:
            k = stack.pop()
            if k == depth:
                ok = True
                break
            n = n0 + k
            c = tree.children(n)
            if used + c > budget:
                nbud += 1
                break
            used += c
            lam = tree.lam(n)
            m = rng.poisson(u * tree.kappa(n))
            if m == 0:
                continue
            up = tree.weight(n - 1) if n > 0 else 0.0
            probs = np.concatenate([np.full(c, tree.weight(n) / lam), [up / lam, tree.kappa(n) / lam]])
            first = rng.multinomial(m, probs / probs.sum())[:c]
            nk = int(np.count_nonzero(first))
            stack.extend([k + 1] * nk)
        nodes[r] = used
        succ += ok
    lo, hi = wilson(succ, N)
    return ExplorationResult(succ, N, nbud, succ / N, (lo, hi), n0, depth, nodes)


def tree_level_connection(tree: LevelTree, h: float, Ls, N: int, seed: int, budget: int = 10 ** 6):
    """``P(root <-> generation L in E^{>=h})`` for each ``L`` from one exploration per replica."""
    Ls = sorted(int(L) for L in Ls)
    Lmax = Ls[-1]
    q, g, lam = generation_recursion(tree, Lmax + 1)
    rho = np.array([1.0 / (2.0 * tree.weight(n)) for n in range(Lmax + 1)])
    deepest = np.full(N, -1, dtype=np.int64)
    for r in range(N):
        rng = rngmod.block_generator(seed, rngmod.EXPLORE, r)
        phi0 = np.sqrt(g[0]) * rng.standard_normal()
        if phi0 < h:
            continue
        best = 0
        stack = [(phi0, 0)]
        used = 0
        while stack and best < Lmax:
            phi, n = stack.pop()
            best = max(best, n)
            if n == Lmax:
                break
            c = tree.children(n)
            used += c
            if used > budget:
                break
            kids = q[n + 1] * phi + np.sqrt(g[n + 1]) * rng.standard_normal(c)
            p = np.where(kids > h, -np.expm1(-(phi - h) * np.clip(kids - h, 0, None) / rho[n]), 0.0)
            for v in kids[rng.random(c) < p][::-1]:
                stack.append((float(v), n + 1))
        deepest[r] = best
    return [_estimate(int(np.sum(deepest >= L)), N, h, L) for L in Ls]


def first_supercritical_generation(tree: LevelTree, u: float, max_generation: int = 1000):
    """First generation whose analytic offspring mean exceeds 1 (None if none up to the cap)."""
    for n in range(max_generation + 1):
        if gw_analytic(tree, u, [n])[0] > 1.0:
            return n
    return None


# ---------------------------------------------------------------------- I/O
def write_estimates_csv(path, family: str, estimates, seed: int):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "h", "L", "estimate", "ci_lo", "ci_hi", "N", "seed"])
        for est in estimates:
            w.writerow([family, "%.12g" % est.h, est.L, "%.12g" % est.estimate, "%.12g" % est.ci_lo,
                        "%.12g" % est.ci_hi, est.N, seed])
