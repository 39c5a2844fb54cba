"""Random interlacement soups on finite windows.

Two recipes:

``killed``
    At each vertex ``x``, ``Poisson(u kappa_x)`` forward walks start at ``x``;
    their backward parts sit on the killing cable of ``x`` and carry no vertex
    local time.
``window``
    ``Poisson(u cap(K))`` trajectories start at i.i.d. points of law
    ``e_K / cap(K)``.  The forward part is a plain walk; the backward part is
    the walk conditioned never to return to ``K``, run with the exact Doob
    kernel of ``v = 1 - u_K``.

Walks that leave the window through its leak are truncated and flagged as
surviving by window escape.  Vertex local time is the occupation time of the
jump process (holding times ``Exp(lambda_x)``), so ``E ell_x = g(x, x)`` for a
walk started at ``x``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import walks
from .graph import GraphError, WeightedGraph
from .potential import equilibrium_measure

logger = logging.getLogger(__name__)

DUMP_VERSION = 1
END_NAMES = {walks.KILLED: "K", walks.ESCAPED: "S", 0: "T"}
ANCHORED = 1
BLOCK = 4096


@dataclass
class Trajectory:
    label: float
    start: int
    forward: np.ndarray
    forward_hold: np.ndarray
    forward_end: int
    backward: np.ndarray
    backward_hold: np.ndarray
    backward_end: int

    @property
    def cls(self):
        f = "K" if self.forward_end == walks.KILLED else "S"
        b = "S" if self.backward_end == walks.ESCAPED else "K"
        return f + b

    def skeleton(self):
        """Full vertex sequence, backward part reversed then forward part."""
        return np.concatenate([self.backward[::-1], self.forward])


@dataclass
class Soup:
    u: float
    recipe: str
    n: int
    trajectories: list
    seed: int
    replica: int
    K: np.ndarray | None = None

    def __len__(self):
        return len(self.trajectories)

    def restrict(self, u):
        """Sub-soup of labels ``<= u`` (the soup at level ``u`` under the coupling)."""
        return Soup(u, self.recipe, self.n, [t for t in self.trajectories if t.label <= u],
                    self.seed, self.replica, self.K)


@dataclass
class LocalTimeField:
    ell: np.ndarray
    visits: np.ndarray
    range_vertices: np.ndarray
    range_edges: np.ndarray | None = None


@dataclass
class SoupSetup:
    """Precomputed tables of one recipe on one window."""

    recipe: str
    graph: WeightedGraph
    fwd: walks.TransitionTable
    src: np.ndarray = None
    src_rate: np.ndarray = None
    src_key: np.ndarray = None
    bwd: walks.TransitionTable = None
    inK: np.ndarray = None
    start_cum: np.ndarray = None
    start_ids: np.ndarray = None
    rate: float = 0.0
    extra: dict = field(default_factory=dict)


def source_keys(graph: WeightedGraph, ids):
    """Stable 64-bit labels of source vertices (lattice coordinates when available)."""
    ids = np.asarray(ids, dtype=np.int64)
    if graph.coords is not None and graph.meta.get("family") in ("grid-with-killing", "z2-pinned") \
            and not graph.meta.get("subdivided"):
        c = np.asarray(graph.coords, dtype=np.int64)[ids] + (1 << 20)
        key = np.zeros(len(ids), dtype=np.uint64)
        for i in range(c.shape[1]):
            key = key * np.uint64(1 << 21) + c[:, i].astype(np.uint64)
        return key + np.uint64(1)
    return ids.astype(np.uint64) + np.uint64(1)


def killed_setup(graph: WeightedGraph, include_leak: bool = False) -> SoupSetup:
    """Sources at killed vertices; with ``include_leak`` the window leak counts as killing.

    The second form is the soup of a finite graph whose boundary is genuine
    killing (for instance a Doob transform whose mass sits on the leak).
    """
    rate = graph.kill_total if include_leak else graph.kappa
    src = np.nonzero(rate > 0)[0]
    return SoupSetup("killed", graph, walks.transition_table(graph), src, rate[src].copy(),
                     source_keys(graph, src), extra={"include_leak": include_leak})


def window_setup(graph: WeightedGraph, K) -> SoupSetup:
    eq = equilibrium_measure(graph, K)
    K = eq.support
    inK = np.zeros(graph.n, dtype=bool)
    inK[K] = True
    setup = SoupSetup("window", graph, walks.transition_table(graph), inK=inK, rate=eq.total,
                      extra={"equilibrium": eq})
    setup.bwd = walks.conditioned_table(graph, K, eq.hitting, eq.escape)
    if eq.total <= 0:
        logger.warning("cap(K) = 0: window soup is empty")
        setup.start_ids = K[:1]
        setup.start_cum = np.ones(1)
        return setup
    w = eq.weights[K]
    setup.start_ids = K.astype(np.int64)
    cum = np.cumsum(w) / w.sum()
    cum[-1] = 1.0
    setup.start_cum = cum
    return setup


# ------------------------------------------------------------ full soups
def _rep_seed(seed, replica):
    return rngmod.replica_seeds(seed, rngmod.SOUP, replica, replica + 1)[0]


def sample_killed_soup(graph: WeightedGraph, u: float, seed: int, replica: int = 0, setup=None,
                       maxlen=10 ** 7) -> Soup:
    """Killed soup at level ``u`` (replica ``replica`` of stream ``seed``)."""
    if u < 0:
        raise ValueError("u must be >= 0")
    st = setup or killed_setup(graph)
    rs = _rep_seed(seed, replica)
    trajs = []
    t = st.fwd
    empty_i, empty_f = np.zeros(0, dtype=np.int64), np.zeros(0)
    for s in range(len(st.src)):
        walks.seed_stream(walks.mix_seed(rs, st.src_key[s]))
        k = walks.poisson_draw(u * st.src_rate[s]) if u > 0 else 0
        for _ in range(k):
            label = u * (1.0 - walks.uniform_draw())
            v, hold, end = walks.record_walk(st.src[s], t.indptr, t.target, t.cum, t.lam, False, maxlen)
            trajs.append(Trajectory(label, int(st.src[s]), v, hold, int(end), empty_i, empty_f, ANCHORED))
    trajs.sort(key=lambda tr: tr.label)
    return Soup(u, "killed", graph.n, trajs, seed, replica)


def sample_window_soup(graph: WeightedGraph, K, u: float, seed: int, replica: int = 0, setup=None,
                       maxlen=10 ** 7, recipe="window") -> Soup:
    """Window soup of trajectories hitting ``K`` at level ``u``."""
    if u < 0:
        raise ValueError("u must be >= 0")
    st = setup or window_setup(graph, K)
    rs = _rep_seed(seed, replica)
    walks.seed_stream(walks.mix_seed(rs, 0))
    n = walks.poisson_draw(u * st.rate) if u > 0 and st.rate > 0 else 0
    labels, starts = [], []
    for _ in range(n):
        labels.append(u * (1.0 - walks.uniform_draw()))
        starts.append(int(st.start_ids[np.searchsorted(st.start_cum, walks.uniform_draw(), side="right")]))
    f, b = st.fwd, st.bwd
    trajs = []
    for j in range(n):
        walks.seed_stream(walks.mix_seed(rs, j + 1))
        v, hold, end = walks.record_walk(starts[j], f.indptr, f.target, f.cum, f.lam, False, maxlen)
        bv, bh, bend = walks.record_walk(starts[j], b.indptr, b.target, b.cum, b.lam, True, maxlen)
        if np.any(st.inK[bv]):
            raise AssertionError("backward part revisited K")
        trajs.append(Trajectory(labels[j], starts[j], v, hold, int(end), bv, bh, int(bend)))
    trajs.sort(key=lambda tr: tr.label)
    return Soup(u, recipe, graph.n, trajs, seed, replica, np.nonzero(st.inK)[0])


def local_times_and_range(soup: Soup, graph: WeightedGraph = None, forward_only=False) -> LocalTimeField:
    """Vertex local times, visit counts and range (vertices and crossed edges)."""
    ell = np.zeros(soup.n)
    visits = np.zeros(soup.n, dtype=np.int64)
    crossed = None if graph is None else np.zeros(graph.m, dtype=bool)
    for tr in soup.trajectories:
        parts = [(tr.forward, tr.forward_hold)]
        if not forward_only:
            parts.append((tr.backward, tr.backward_hold))
        for v, h in parts:
            np.add.at(ell, v, h)
            np.add.at(visits, v, 1)
        if crossed is not None:
            path = tr.forward if forward_only else tr.skeleton()
            for a, c in zip(path[:-1], path[1:]):
                if a != c:
                    crossed[graph.edge_index(int(a), int(c))] = True
    return LocalTimeField(ell, visits, visits > 0, crossed)


def classify(soup: Soup):
    """Trajectory classes (forward end letter, then backward end letter) and counts.

    ``K`` = killed (including anchoring on a killing cable), ``S`` = survived
    (window escape).
    """
    classes = [tr.cls for tr in soup.trajectories]
    counts = {c: classes.count(c) for c in ("KK", "SS", "KS", "SK")}
    return classes, counts


def dump_soup(soup: Soup, fh):
    """Write ``# soup v1`` header, then ``label class start | backward | forward | holds``."""
    fh.write("# soup v%d recipe=%s u=%.12g seed=%d replica=%d n=%d\n"
             % (DUMP_VERSION, soup.recipe, soup.u, soup.seed, soup.replica, soup.n))
    for tr in soup.trajectories:
        fh.write("%.12g %s %d | %s | %s | %s | %s\n" % (
            tr.label, tr.cls, tr.start,
            " ".join(map(str, tr.backward)), " ".join(map(str, tr.forward)),
            " ".join("%.12g" % x for x in tr.backward_hold), " ".join("%.12g" % x for x in tr.forward_hold)))


# ----------------------------------------------------------- fast path
@dataclass
class OccupationBlock:
    r0: int
    r1: int
    counts: np.ndarray
    ltime: np.ndarray
    ntraj: np.ndarray
    nesc: np.ndarray


def _run_block(args):
    st, levels, seed, r0, r1 = args
    seeds = rngmod.replica_seeds(seed, rngmod.SOUP, r0, r1)
    B, L, V = r1 - r0, len(levels), st.graph.n
    counts = np.zeros((B, L, V), dtype=np.int64)
    ltime = np.zeros((B, L, V))
    ntraj = np.zeros((B, L), dtype=np.int64)
    nesc = np.zeros((B, L), dtype=np.int64)
    f = st.fwd
    if st.recipe == "killed":
        walks.killed_soup_block(f.indptr, f.target, f.cum, f.lam, st.src, st.src_rate, st.src_key,
                                levels, seeds, counts, ltime, ntraj, nesc)
    else:
        b = st.bwd
        viol = np.zeros(B, dtype=np.int64)
        walks.window_soup_block(f.indptr, f.target, f.cum, f.lam, b.indptr, b.target, b.cum, st.inK,
                                st.start_cum, st.start_ids, st.rate, levels, seeds, counts, ltime, ntraj, viol)
        if viol.any():
            raise AssertionError("backward part revisited K")
    return OccupationBlock(r0, r1, counts, ltime, ntraj, nesc)


def occupation_blocks(setup: SoupSetup, levels, n_rep: int, seed: int, r0: int = 0, workers: int = 1,
                      block: int = BLOCK):
    """Iterate over per-replica visit counts and local times, in replica blocks.

    ``levels`` is an increasing list of ``u`` values; all levels come from one
    soup at the largest level thinned by labels, so they are exactly coupled.
    """
    levels = np.asarray(sorted(levels), dtype=float)
    if levels[0] < 0:
        raise ValueError("u must be >= 0")
    jobs = [(setup, levels, seed, a, min(a + block, r0 + n_rep)) for a in range(r0, r0 + n_rep, block)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            yield from ex.map(_run_block, jobs)
    else:
        for j in jobs:
            yield _run_block(j)
