"""Random edge processes on typed vertex sets.

Edges live in condensed form: one boolean per unordered pair ``i < j`` in
row-major order (the ``scipy.spatial.distance.squareform`` layout). Self
loops are implicit and always on.
"""

import json
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.spatial.distance import squareform

from . import rng as rngmod
from .config import MembershipMap


class ModeError(RuntimeError):
    pass


def n_pairs(n):
    return n * (n - 1) // 2


@lru_cache(maxsize=8)
def _pair_type_codes(counts):
    """Type-pair code ``alpha*K + gamma`` for every condensed edge slot."""
    k = len(counts)
    types = np.repeat(np.arange(k), counts)
    if k == 1:
        return np.zeros(n_pairs(len(types)), dtype=np.int64)
    codes = (types[:, None] * k + types[None, :]).astype(float)
    np.fill_diagonal(codes, 0.0)
    return squareform(codes, checks=False).astype(np.int64)


def per_edge(membership, table):
    """Expand a symmetric K x K table to one value per condensed edge."""
    table = np.asarray(table, dtype=float)
    if table.ndim == 0 or table.size == 1:
        return np.full(n_pairs(membership.n), float(table.reshape(-1)[0]))
    return table.reshape(-1)[_pair_type_codes(tuple(membership.counts))]


def transition_probs(rate_on, rate_off, delta):
    """``(P(0->1), P(1->1))`` of the on/off chain over a step ``delta``."""
    rate_on = np.asarray(rate_on, dtype=float)
    rate_off = np.asarray(rate_off, dtype=float)
    total = rate_on + rate_off
    pi = np.divide(rate_on, total, out=np.zeros_like(total), where=total > 0)
    e = np.exp(-total * delta)
    return pi * (1.0 - e), pi + (1.0 - pi) * e


def marginal_edge_probability(t, p0, rate_on, rate_off):
    """P(edge on at time ``t``) for the on/off chain started on w.p. ``p0``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("time must be non-negative")
    total = np.asarray(rate_on, float) + np.asarray(rate_off, float)
    e = np.exp(-total * np.asarray(t, float))
    pi = np.divide(rate_on, total, out=np.zeros_like(np.asarray(total, float)), where=total > 0)
    return p0 * e + pi * (1.0 - e)


def pbar(mode, prob0, T, rate_on=None, rate_off=None, grid=None):
    """Smallest edge probability over type pairs and ``[0, T]``.

    The on/off marginal is monotone in time, so the minimum over the grid is
    attained at ``0`` or ``T``; both are always included.
    """
    prob0 = np.asarray(prob0, dtype=float)
    if mode == "static":
        return float(prob0.min())
    times = np.array([0.0, float(T)])
    if grid is not None:
        times = np.union1d(times, np.asarray(grid, float))
    vals = marginal_edge_probability(times[:, None, None], prob0[None], np.asarray(rate_on)[None],
                                     np.asarray(rate_off)[None])
    return float(vals.min())


@dataclass(frozen=True, eq=False)
class EdgeSystem:
    """Edge states at one grid time.

    ``key`` is the spawn-key prefix of the owning replication; ``step`` counts
    evolutions and selects the uniform stream of the next one.
    """

    membership: MembershipMap
    upper: np.ndarray
    mode: str
    prob0: np.ndarray
    rate_on: object = None
    rate_off: object = None
    time: float = 0.0
    seed: int = 0
    key: tuple = (0,)
    step: int = 0

    @property
    def n(self):
        return self.membership.n

    def dense(self, dtype=float):
        a = squareform(self.upper.astype(dtype), checks=False)
        np.fill_diagonal(a, 1)
        return a

    def degrees(self):
        return degree_counts(self, self.membership)

    def packed(self):
        return np.packbits(self.upper)

    def state_hash(self):
        import hashlib
        return hashlib.sha256(self.packed().tobytes() + str(self.n).encode()).hexdigest()


def _bernoulli_edges(membership, prob0, seed, key):
    probs = per_edge(membership, prob0)
    u = rngmod.edge_uniforms(seed, (*key, rngmod.GRAPH, 0), len(probs))
    return u < probs


def sample_static_graph(membership, prob0, seed=0, key=(0,)):
    """Independent Bernoulli edges, frozen for the whole horizon."""
    prob0 = np.asarray(prob0, dtype=float)
    if np.any(prob0 < 0) or np.any(prob0 > 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    upper = _bernoulli_edges(membership, prob0, seed, key)
    return EdgeSystem(membership, upper, "static", prob0, seed=seed, key=tuple(key))


def sample_markov_graph(membership, prob0, rate_on, rate_off, seed=0, key=(0,)):
    """Initial state of the on/off edge chains: Bernoulli(prob0) per edge."""
    prob0 = np.asarray(prob0, dtype=float)
    upper = _bernoulli_edges(membership, prob0, seed, key)
    return EdgeSystem(membership, upper, "markov", prob0, np.asarray(rate_on, float),
                      np.asarray(rate_off, float), seed=seed, key=tuple(key))


def evolve_markov_edges(edges, delta):
    """Advance every off-diagonal edge by ``delta`` with the exact chain kernel."""
    if edges.mode != "markov":
        raise ModeError(f"cannot evolve edges in {edges.mode!r} mode")
    if not delta > 0:
        raise ValueError("delta must be positive")
    p01, p11 = transition_probs(edges.rate_on, edges.rate_off, delta)
    p01, p11 = per_edge(edges.membership, p01), per_edge(edges.membership, p11)
    step = edges.step + 1
    u = rngmod.edge_uniforms(edges.seed, (*edges.key, rngmod.GRAPH, step), len(edges.upper))
    upper = np.where(edges.upper, u < p11, u < p01)
    return replace(edges, upper=upper, time=edges.time + delta, step=step)


def degree_counts(edges, membership=None):
    """``N_{i,gamma}`` as an ``(N, K)`` integer array, self loop included."""
    membership = membership or edges.membership
    adj = edges.dense(np.int64) if isinstance(edges, EdgeSystem) else np.asarray(edges)
    return np.stack([adj[:, membership.block(g)].sum(axis=1) for g in range(membership.n_types)], axis=1)


def edge_system_from_config(config, key=(0,)):
    mode, p0, lam, mu = config.edge_arrays()
    m = config.membership_map()
    if mode == "static":
        return sample_static_graph(m, p0, config.seed, key)
    return sample_markov_graph(m, p0, lam, mu, config.seed, key)


class EdgeTrajectory:
    """Edge states at every grid time of a config (a single state if static)."""

    def __init__(self, config, key=(0,)):
        self.grid = config.grid
        first = edge_system_from_config(config, key)
        self.membership = first.membership
        self.static = first.mode == "static"
        states = [first]
        if not self.static:
            for _ in range(len(self.grid) - 1):
                states.append(evolve_markov_edges(states[-1], config.dt))
        self.states = states

    def at(self, m):
        return self.states[0 if self.static else m]


# ---------------------------------------------------------------------------
# snapshot dumps: one JSON record per grid time, edges run-length encoded


def rle_encode(bits):
    bits = np.asarray(bits, dtype=bool)
    if len(bits) == 0:
        return 0, []
    change = np.flatnonzero(np.diff(bits.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [len(bits)]])
    return int(bits[0]), np.diff(bounds).tolist()


def rle_decode(first, runs):
    out = np.zeros(int(sum(runs)), dtype=bool)
    pos, val = 0, bool(first)
    for r in runs:
        out[pos:pos + r] = val
        pos += r
        val = not val
    return out


def write_snapshots(path, systems):
    """Write ``{"time", "N", "first", "runs"}`` lines for each edge system."""
    with open(path, "w") as fh:
        for es in systems:
            first, runs = rle_encode(es.upper)
            fh.write(json.dumps({"time": es.time, "N": es.n, "first": first, "runs": runs}) + "\n")


def read_snapshots(path):
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out.append((rec["time"], rec["N"], rle_decode(rec["first"], rec["runs"])))
    return out
