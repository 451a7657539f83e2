"""Seed bookkeeping.

Every random quantity is drawn from a substream keyed by the master seed plus
a tuple of integers naming what is being drawn (replication, purpose, index).
Results therefore never depend on iteration order, batching or thread count.
"""

import numpy as np

# purpose tags, the second element of every spawn key
GRAPH = 1
PARTICLE = 2
REFERENCE = 3
MONTE_CARLO = 4

EDGE_BLOCK = 1 << 16


def substream(seed, *key):
    """Independent generator for ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def edge_uniforms(seed, key, n_edges):
    """Uniforms for ``n_edges`` condensed edge slots.

    Slots are grouped into fixed blocks of ``EDGE_BLOCK`` consecutive edge
    indices; block ``b`` always reads from ``substream(seed, *key, b)``, so any
    partition of the edge range along block boundaries reproduces the same
    values.
    """
    out = np.empty(n_edges)
    for b, start in enumerate(range(0, n_edges, EDGE_BLOCK)):
        stop = min(start + EDGE_BLOCK, n_edges)
        out[start:stop] = substream(seed, *key, b).random(stop - start)
    return out
