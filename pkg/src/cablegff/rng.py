"""Seeded, block-keyed random streams.

Replicas are grouped in fixed blocks of ``BLOCK``; block ``b`` of stream
``tag`` uses a Philox generator keyed by ``SeedSequence(seed, spawn_key=(tag, b))``.
Replica ``r`` therefore sees the same numbers whatever the chunking or the
number of workers.
"""
from __future__ import annotations

import numpy as np

BLOCK = 1024

# stream tags
GFF = 1
OPEN = 2
SOUP = 3
TREE = 4
EXPLORE = 5
THRESH = 6


def block_generator(seed: int, tag: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(tag), int(block)))))


def blocks(r0: int, r1: int):
    """Yield ``(block, lo, hi)`` with global replica range ``[lo, hi)`` inside each block."""
    b = r0 // BLOCK
    while b * BLOCK < r1:
        lo, hi = max(r0, b * BLOCK), min(r1, (b + 1) * BLOCK)
        yield b, lo, hi
        b += 1


def block_draws(seed, tag, r0, r1, width, kind="normal"):
    """Per-replica draws of ``width`` numbers for replicas ``r0..r1-1``.

    Returns an array of shape ``(r1 - r0, width)``; row ``r`` depends only on
    ``(seed, tag, r)`` and ``width``.
    """
    out = np.empty((r1 - r0, width))
    for b, lo, hi in blocks(r0, r1):
        g = block_generator(seed, tag, b)
        arr = g.standard_normal((BLOCK, width)) if kind == "normal" else g.random((BLOCK, width))
        out[lo - r0:hi - r0] = arr[lo - b * BLOCK:hi - b * BLOCK]
    return out


def replica_seeds(seed, tag, r0, r1):
    """64-bit seeds for compiled kernels, one per replica."""
    out = np.empty(r1 - r0, dtype=np.uint64)
    for b, lo, hi in blocks(r0, r1):
        s = np.random.SeedSequence(int(seed), spawn_key=(int(tag), int(b))).generate_state(BLOCK, dtype=np.uint64)
        out[lo - r0:hi - r0] = s[lo - b * BLOCK:hi - b * BLOCK]
    return out
