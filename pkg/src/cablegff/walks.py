"""Jump-chain transition tables and compiled walk kernels.

A :class:`TransitionTable` stores, per vertex, a row of slots with cumulative
probabilities; a slot target is a vertex id, ``KILLED`` or ``ESCAPED``.  On
lattice windows the neighbour slots follow a fixed direction order and a
window-cut direction becomes an escape slot in place, so one uniform picks
the same move in every window containing the vertex.

Randomness inside the kernels comes from numba's generator, reseeded from a
32-bit key per source vertex (killed soups) or per trajectory (window soups).
Keys are mixed from the replica seed and a stable label, which makes samples
independent of block sizes and worker counts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

KILLED = -1
ESCAPED = -2

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


@dataclass
class TransitionTable:
    indptr: np.ndarray
    target: np.ndarray
    cum: np.ndarray
    lam: np.ndarray

    @property
    def n(self):
        return len(self.lam)

    def row(self, x):
        lo, hi = self.indptr[x], self.indptr[x + 1]
        p = np.diff(np.concatenate([[0.0], self.cum[lo:hi]]))
        return self.target[lo:hi], p


def _rows_from_lists(targets, probs, lam):
    indptr = np.zeros(len(targets) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(t) for t in targets])
    tgt = np.concatenate([np.asarray(t, dtype=np.int64) for t in targets])
    cum = np.concatenate([np.cumsum(p) / np.sum(p) for p in probs])
    ends = indptr[1:] - 1
    cum[ends] = 1.0
    return TransitionTable(indptr, tgt, cum, np.asarray(lam, dtype=float))


def transition_table(graph, kill=None, leak=None, weights=None):
    """Jump-chain table of ``graph`` (optionally with replaced rates).

    Parameters
    ----------
    kill, leak : ndarray, optional
        Killing and escape rates per vertex (default: the graph's own).
    weights : ndarray, optional
        Per-edge weights replacing ``graph.weights`` (same edge order).
    """
    kill = graph.kappa if kill is None else np.asarray(kill, dtype=float)
    leak = graph.leak if leak is None else np.asarray(leak, dtype=float)
    w_edge = graph.weights if weights is None else np.asarray(weights, dtype=float)
    indptr, cols, _, eids = graph.adjacency()
    coords = graph.coords
    lattice = (graph.meta.get("family") in ("grid-with-killing", "z2-pinned") and coords is not None
               and not graph.meta.get("subdivided"))
    targets, probs, lam = [], [], np.zeros(graph.n)
    if lattice:
        coords = np.asarray(coords)
        dim = coords.shape[1]
        dirs = [(-1, a) for a in range(dim)] + [(+1, a) for a in reversed(range(dim))]
        R = graph.meta.get("radius")
        removed = {tuple(p) for p in graph.meta.get("removed", [])}
    for x in range(graph.n):
        nb_ = cols[indptr[x]:indptr[x + 1]]
        w = w_edge[eids[indptr[x]:indptr[x + 1]]]
        if lattice:
            by_pt = {tuple(coords[y]): (y, wy) for y, wy in zip(nb_, w)}
            t, p = [], []
            esc_left = leak[x]
            per_dir_leak = leak[x] / max(1, int(np.sum(np.abs(coords[x]) == R))) if R else 0.0
            for sgn, a in dirs:
                q = coords[x].copy()
                q[a] += sgn
                key = tuple(q)
                if key in by_pt:
                    t.append(by_pt[key][0])
                    p.append(by_pt[key][1])
                elif key in removed:
                    continue
                elif R is not None and np.max(np.abs(q)) > R:
                    share = min(per_dir_leak, esc_left)
                    esc_left -= share
                    t.append(ESCAPED)
                    p.append(share)
            if esc_left > 1e-15:
                t.append(ESCAPED)
                p.append(esc_left)
        else:
            t = list(nb_)
            p = list(w)
            if leak[x] > 0:
                t.append(ESCAPED)
                p.append(leak[x])
        if kill[x] > 0:
            t.append(KILLED)
            p.append(kill[x])
        lam[x] = float(np.sum(p))
        targets.append(t)
        probs.append(p)
    return _rows_from_lists(targets, probs, lam)


def conditioned_table(graph, K, hit, escape):
    """Table of the walk conditioned never to (re)visit ``K``.

    Rows of ``K`` vertices hold the first-step kernel given no return;
    other rows hold the Doob kernel of ``v = 1 - hit``.
    """
    inK = np.zeros(graph.n, dtype=bool)
    inK[np.asarray(K)] = True
    v = 1.0 - hit
    v[inK] = 0.0
    indptr, cols, w, _ = graph.adjacency()
    targets, probs = [], []
    for x in range(graph.n):
        nb_ = cols[indptr[x]:indptr[x + 1]]
        wx = w[indptr[x]:indptr[x + 1]]
        norm = graph.lam[x] * (escape[x] if inK[x] else v[x])
        if norm <= 0:
            targets.append([KILLED])
            probs.append([1.0])
            continue
        t = list(nb_)
        p = list(wx * v[nb_] / norm)
        if graph.leak[x] > 0:
            t.append(ESCAPED)
            p.append(graph.leak[x] / norm)
        if graph.kappa[x] > 0:
            t.append(KILLED)
            p.append(graph.kappa[x] / norm)
        targets.append(t)
        probs.append(p)
    return _rows_from_lists(targets, probs, graph.lam)


# ------------------------------------------------------------------ kernels
@nb.njit(cache=True)
def mix_seed(a, b):
    """32-bit seed from two 64-bit keys (splitmix64 finalizer)."""
    z = np.uint64(a) * _GOLD + np.uint64(b) + _GOLD
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    z = z ^ (z >> np.uint64(31))
    return np.uint32(z & np.uint64(0xFFFFFFFF))


@nb.njit(cache=True)
def _step(x, indptr, target, cum):
    r = np.random.random()
    k = indptr[x]
    hi = indptr[x + 1] - 1
    while k < hi and r >= cum[k]:
        k += 1
    return target[k]


@nb.njit(cache=True)
def _level_index(label, levels):
    # first level index whose value is >= label
    for i in range(len(levels)):
        if label <= levels[i]:
            return i
    return len(levels)


@nb.njit(cache=True)
def killed_soup_block(indptr, target, cum, lam, src, src_rate, src_key, levels, rep_seeds,
                      counts, ltime, ntraj, nesc):
    """Accumulate visit counts and local times of killed soups, per level.

    ``counts``/``ltime`` have shape ``(B, nlev, V)``; a trajectory with label
    ``l`` contributes to every level ``>= l``.
    """
    umax = levels[-1]
    nlev = len(levels)
    for r in range(len(rep_seeds)):
        for s in range(len(src)):
            np.random.seed(mix_seed(rep_seeds[r], src_key[s]))
            k = np.random.poisson(umax * src_rate[s])
            for j in range(k):
                label = umax * (1.0 - np.random.random())
                li = _level_index(label, levels)
                x = src[s]
                while True:
                    t = np.random.exponential(1.0 / lam[x])
                    for q in range(li, nlev):
                        counts[r, q, x] += 1
                        ltime[r, q, x] += t
                    y = _step(x, indptr, target, cum)
                    if y < 0:
                        if y == -2:
                            for q in range(li, nlev):
                                nesc[r, q] += 1
                        break
                    x = y
                for q in range(li, nlev):
                    ntraj[r, q] += 1


@nb.njit(cache=True)
def window_soup_block(fi, ft, fc, lam, bi, bt, bc, inK, start_cum, start_ids, rate, levels,
                      rep_seeds, counts, ltime, ntraj, violations):
    """Window (equilibrium-measure) soups: forward plain walk, backward conditioned walk."""
    umax = levels[-1]
    nlev = len(levels)
    for r in range(len(rep_seeds)):
        np.random.seed(mix_seed(rep_seeds[r], 0))
        n = np.random.poisson(umax * rate)
        starts = np.empty(n, dtype=np.int64)
        labels = np.empty(n)
        for j in range(n):
            labels[j] = umax * (1.0 - np.random.random())
            starts[j] = start_ids[np.searchsorted(start_cum, np.random.random(), side="right")]
        for j in range(n):
            np.random.seed(mix_seed(rep_seeds[r], j + 1))
            li = _level_index(labels[j], levels)
            for q in range(li, nlev):
                ntraj[r, q] += 1
            x = starts[j]
            while True:
                t = np.random.exponential(1.0 / lam[x])
                for q in range(li, nlev):
                    counts[r, q, x] += 1
                    ltime[r, q, x] += t
                y = _step(x, fi, ft, fc)
                if y < 0:
                    break
                x = y
            x = _step(starts[j], bi, bt, bc)
            while x >= 0:
                if inK[x]:
                    violations[r] += 1
                t = np.random.exponential(1.0 / lam[x])
                for q in range(li, nlev):
                    counts[r, q, x] += 1
                    ltime[r, q, x] += t
                x = _step(x, bi, bt, bc)


@nb.njit(cache=True)
def record_walk(x0, indptr, target, cum, lam, skip_first, maxlen):
    """Single walk from ``x0``; returns (vertices, holding times, end code).

    With ``skip_first`` the start vertex is not recorded (backward parts).
    """
    verts = np.empty(maxlen, dtype=np.int64)
    hold = np.empty(maxlen)
    n = 0
    x = x0
    if skip_first:
        x = _step(x0, indptr, target, cum)
    while x >= 0:
        if n == maxlen:
            return verts[:n], hold[:n], 0
        verts[n] = x
        hold[n] = np.random.exponential(1.0 / lam[x])
        n += 1
        x = _step(x, indptr, target, cum)
    return verts[:n], hold[:n], x


@nb.njit(cache=True)
def seed_stream(s):
    np.random.seed(s)


@nb.njit(cache=True)
def poisson_draw(mu):
    return np.random.poisson(mu)


@nb.njit(cache=True)
def uniform_draw():
    return np.random.random()


@nb.njit(cache=True)
def count_transitions(indptr, target, cum, x0s, seed, nslots_out, max_steps):
    """Slot-usage counts of independent walks started at ``x0s``."""
    np.random.seed(seed)
    for i in range(len(x0s)):
        x = x0s[i]
        steps = 0
        while x >= 0 and steps < max_steps:
            r = np.random.random()
            k = indptr[x]
            hi = indptr[x + 1] - 1
            while k < hi and r >= cum[k]:
                k += 1
            nslots_out[k] += 1
            x = target[k]
            steps += 1
