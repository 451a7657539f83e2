"""Euler-Maruyama integration of the graph-interacting system and its
mean-field companion on a shared grid with shared noise."""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rngmod
from .config import MembershipMap, build_membership, sample_initial
from .graph import EdgeSystem, degree_counts, edge_system_from_config, evolve_markov_edges


class SimulationError(FloatingPointError):
    pass


@dataclass(eq=False)
class PathEnsemble:
    """Trajectories of one replication on ``grid``.

    ``Z`` is the graph system, ``X`` the mean-field system driven by the same
    ``x0`` and ``dW``. Arrays are ``(N, M+1, d)`` for states and ``(N, M, d)``
    for increments.
    """

    grid: np.ndarray
    membership: MembershipMap
    x0: np.ndarray
    dW: np.ndarray
    Z: Optional[np.ndarray] = None
    X: Optional[np.ndarray] = None
    replication: int = 0
    edges: Optional[EdgeSystem] = None

    @property
    def W(self):
        n, m, d = self.dW.shape
        out = np.zeros((n, m + 1, d))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out

    @property
    def dt(self):
        return np.diff(self.grid)


@dataclass(frozen=True)
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray

    @property
    def mass(self):
        return float(self.weights.sum())

    def integrate(self, f):
        if len(self.weights) == 0:
            return 0.0
        return float(np.dot(self.weights, f(self.points)))


# ---------------------------------------------------------------------------
# coefficients


def _block_term(kern, zi, zj, adj, deg, chunk=64):
    """``sum_j adj_ij kern(z_i, z_j) / deg_i``, zero where ``deg_i == 0``.

    ``zi``: (B, n_i, d), ``zj``: (B, n_j, d), ``adj``: (B, n_i, n_j) or None
    for the complete block, ``deg``: (B, n_i) or None.
    """
    b, ni, d = zi.shape
    if adj is None:
        deg = np.full((b, ni), float(zj.shape[1]))
    on = deg > 0
    if kern.y_free:
        return kern(zi, zi) * on[..., None]
    safe = np.where(on, deg, 1.0)[..., None]
    if kern.factored:
        right = kern.right(zj)
        k = right.shape[-2]
        right = right.reshape(b, zj.shape[1], k * d)
        if adj is None:
            s = np.broadcast_to(right.sum(axis=1, keepdims=True), (b, ni, k * d))
        else:
            s = np.matmul(adj, right)
        s = (s / safe).reshape(b, ni, k, d) * on[..., None, None]
        return (kern.left(zi) * s).sum(axis=-2)
    out = np.empty_like(zi)
    for s0 in range(0, ni, chunk):
        vals = kern(zi[:, s0:s0 + chunk, None, :], zj[:, None, :, :])
        if adj is None:
            acc = vals.sum(axis=2)
        else:
            acc = np.einsum("bij,bijd->bid", adj[:, s0:s0 + chunk], vals)
        out[:, s0:s0 + chunk] = acc / safe[:, s0:s0 + chunk] * on[:, s0:s0 + chunk, None]
    return out


def coefficients(kset, membership, z, adj=None, deg=None):
    """Drift and diffusion diagonal for every particle; arrays carry a batch axis.

    With ``adj=None`` each particle averages over its whole type block (the
    mean-field system).
    """
    drift = np.zeros_like(z)
    diff = np.zeros_like(z)
    for a in range(membership.n_types):
        ra = membership.block(a)
        for g in range(membership.n_types):
            rg = membership.block(g)
            blk = None if adj is None else adj[:, ra, rg]
            dg = None if deg is None else deg[:, ra, g]
            drift[:, ra] += _block_term(kset.drift[a][g], z[:, ra], z[:, rg], blk, dg)
            diff[:, ra] += _block_term(kset.diffusion[a][g], z[:, ra], z[:, rg], blk, dg)
    return drift, diff


def drift_and_diffusion_eval(i, states, adjacency, kset, membership):
    """Reference evaluation of particle ``i``'s coefficients by explicit sums.

    Returns ``(drift (d,), diffusion (d, d))``. Used to cross-check the
    vectorised engine.
    """
    states = np.asarray(states, float)
    adjacency = adjacency.dense() if isinstance(adjacency, EdgeSystem) else np.asarray(adjacency)
    alpha = int(membership.assignments[i])
    d = states.shape[1]
    drift = np.zeros(d)
    diff = np.zeros((d, d))
    for g in range(membership.n_types):
        nbrs = [j for j in range(membership.block(g).start, membership.block(g).stop) if adjacency[i, j]]
        if not nbrs:
            continue
        for j in nbrs:
            drift += kset.drift[alpha][g](states[i], states[j]) / len(nbrs)
            diff += kset.diffusion[alpha][g].matrix(states[i], states[j]) / len(nbrs)
    return drift, diff


# ---------------------------------------------------------------------------
# integration


def particle_noise(seed, rep, membership, laws, d, steps, dt, keys=None, tag=rngmod.PARTICLE):
    """Initial points and Brownian increments, one substream per particle."""
    n = membership.n
    keys = range(n) if keys is None else keys
    types = membership.assignments
    x0 = np.empty((n, d))
    dw = np.empty((n, steps, d))
    sq = np.sqrt(dt)
    for i, key in enumerate(keys):
        g = rngmod.substream(seed, rep, tag, key)
        x0[i] = sample_initial(laws[types[i]], g, d)
        dw[i] = g.standard_normal((steps, d)) * sq
    return x0, dw


def _check(z, m, what):
    if not np.all(np.isfinite(z)):
        bad = np.argwhere(~np.isfinite(z))[0]
        raise SimulationError(f"non-finite {what} state at step {m}, index {tuple(bad)}")


def _integrate(config, reps, coupled, keys=None):
    kset = config.kernel_set()
    mm = config.membership_map()
    steps, dt, d = int(config.steps), config.dt, int(config.d)
    laws = config.initial_laws()
    noise = [particle_noise(config.seed, r, mm, laws, d, steps, dt, keys) for r in reps]
    x0 = np.stack([x for x, _ in noise])
    dw = np.stack([w for _, w in noise])
    b, n = len(reps), mm.n
    del noise

    edges = [edge_system_from_config(config, key=(r,)) for r in reps]
    adj = np.stack([e.dense() for e in edges])
    deg = adj_degrees(adj, mm)
    zpath = np.empty((b, n, steps + 1, d))
    zpath[:, :, 0] = x0
    z = x0.copy()
    xpath = None
    if coupled:
        xpath = np.empty_like(zpath)
        xpath[:, :, 0] = x0
        x = x0.copy()
    for m in range(steps):
        dr, df = coefficients(kset, mm, z, adj, deg)
        z = z + dr * dt + df * dw[:, :, m]
        _check(z, m, "interacting")
        zpath[:, :, m + 1] = z
        if coupled:
            dr, df = coefficients(kset, mm, x, None, None)
            x = x + dr * dt + df * dw[:, :, m]
            _check(x, m, "mean-field")
            xpath[:, :, m + 1] = x
        if edges[0].mode == "markov" and m < steps - 1:
            edges = [evolve_markov_edges(e, dt) for e in edges]
            adj = np.stack([e.dense() for e in edges])
            deg = adj_degrees(adj, mm)
    grid = config.grid
    return [PathEnsemble(grid, mm, x0[k], dw[k], zpath[k], None if xpath is None else xpath[k],
                         replication=r, edges=edges[k]) for k, r in enumerate(reps)]


def adj_degrees(adj, membership):
    return np.stack([adj[:, :, membership.block(g)].sum(axis=2) for g in range(membership.n_types)], axis=2)


def simulate_interacting(config, replication=0, keys=None):
    """One replication of the graph system (``Z`` only)."""
    return _integrate(config, [replication], coupled=False, keys=keys)[0]


def simulate_coupled(config, replication=0, keys=None):
    """One replication of the graph system and the mean-field system on shared noise."""
    return _integrate(config, [replication], coupled=True, keys=keys)[0]


def simulate_mean_field(config, n_paths=None, stream=0):
    """Reference sample of limit paths: the mean-field system alone.

    Uses its own noise streams (independent of any replication of the
    graph system); ``Z`` is left empty.
    """
    base = config.membership_map()
    n_paths = base.n if n_paths is None else int(n_paths)
    mm = build_membership({"proportions": base.proportions.tolist()}, n_paths)
    kset = config.kernel_set()
    steps, dt, d = int(config.steps), config.dt, int(config.d)
    x0, dw = particle_noise(config.seed, stream, mm, config.initial_laws(), d, steps, dt,
                            tag=rngmod.REFERENCE)
    x = x0[None].copy()
    path = np.empty((1, n_paths, steps + 1, d))
    path[:, :, 0] = x
    for m in range(steps):
        dr, df = coefficients(kset, mm, x, None, None)
        x = x + dr * dt + df * dw[None, :, m]
        _check(x, m, "mean-field")
        path[:, :, m + 1] = x
    return PathEnsemble(config.grid, mm, x0, dw, None, path[0], replication=stream)


def batch_size(n, steps, d, coupled=True):
    adj_budget = 2 ** 25 // max(1, n * n * 8)
    path_budget = 2 ** 26 // max(1, n * (steps + 1) * d * 8 * (3 if coupled else 2))
    return max(1, min(adj_budget, path_budget))


def run_replications(config, summary, coupled=True, replications=None, threads=1):
    """Apply ``summary(ensemble)`` to each replication; results in replication order.

    Replications are grouped in batches whose size depends only on the
    problem shape, so results do not depend on ``threads``.
    """
    reps = list(range(int(config.replications))) if replications is None else list(replications)
    size = batch_size(int(config.N), int(config.steps), int(config.d), coupled)
    batches = [reps[s:s + size] for s in range(0, len(reps), size)]

    def work(batch):
        return [summary(ens) for ens in _integrate(config, batch, coupled)]

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, batches))
    else:
        parts = [work(bt) for bt in batches]
    return [x for part in parts for x in part]


def snapshot_empirical(paths, m, gamma, membership, vertex=None, adjacency=None):
    """Empirical measure of type ``gamma`` at grid index ``m``.

    With ``vertex`` the weights are uniform over that vertex's type-``gamma``
    neighbours under ``adjacency`` (the zero measure if it has none).
    """
    blk = membership.block(gamma)
    pts = np.asarray(paths)[blk, m]
    n = len(pts)
    if vertex is None:
        return EmpiricalMeasure(pts, np.full(n, 1.0 / n))
    adj = adjacency.dense() if isinstance(adjacency, EdgeSystem) else np.asarray(adjacency)
    row = adj[vertex, blk].astype(float)
    k = row.sum()
    return EmpiricalMeasure(pts, row / k if k > 0 else np.zeros(n))


# ---------------------------------------------------------------------------
# flat binary path dump

_MAGIC = b"WIPSPTH1"


def write_paths(path, ens):
    """Little-endian dump: magic, ``N M d has_X`` as uint64, grid, Z, [X], dW."""
    n, m1, d = ens.Z.shape
    has_x = ens.X is not None
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4Q", n, m1 - 1, d, int(has_x)))
        fh.write(np.ascontiguousarray(ens.grid, "<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.Z, "<f8").tobytes())
        if has_x:
            fh.write(np.ascontiguousarray(ens.X, "<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.dW, "<f8").tobytes())


def read_paths(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not a path dump")
        n, m, d, has_x = struct.unpack("<4Q", fh.read(32))
        grid = np.frombuffer(fh.read(8 * (m + 1)), "<f8")
        z = np.frombuffer(fh.read(8 * n * (m + 1) * d), "<f8").reshape(n, m + 1, d)
        x = np.frombuffer(fh.read(8 * n * (m + 1) * d), "<f8").reshape(n, m + 1, d) if has_x else None
        dw = np.frombuffer(fh.read(8 * n * m * d), "<f8").reshape(n, m, d)
    return {"grid": grid, "Z": z, "X": x, "dW": dw}
