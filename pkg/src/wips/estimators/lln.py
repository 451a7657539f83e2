"""Coupling errors, rate tables, BL surrogate distances and chaos covariances."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CouplingError:
    sup_sq: np.ndarray      # per particle max_t |Z - X|^2
    sup: np.ndarray         # per particle max_t |Z - X|

    @property
    def mean_sup_sq(self):
        return float(self.sup_sq.mean())

    @property
    def mean_sup(self):
        return float(self.sup.mean())


def coupling_error(ens):
    if ens.X is None or ens.Z is None:
        raise ValueError("coupling error needs both Z and X paths")
    dist = np.linalg.norm(ens.Z - ens.X, axis=-1).max(axis=1)
    return CouplingError(dist ** 2, dist)


@dataclass
class RateTable:
    n_bar: np.ndarray
    p_bar: np.ndarray
    error: np.ndarray
    scaled: np.ndarray
    slope: float
    intercept: float
    notes: list = field(default_factory=list)

    @property
    def scale(self):
        return self.n_bar * self.p_bar

    @property
    def variation(self):
        """max/min ratio of the scaled column."""
        return float(self.scaled.max() / self.scaled.min())

    def rows(self):
        return [{"n_bar": int(n), "p_bar": float(p), "np": float(n * p), "error": float(e), "scaled": float(s)}
                for n, p, e, s in zip(self.n_bar, self.p_bar, self.error, self.scaled)]


def lln_rate_table(entries, floor=np.finfo(float).tiny):
    """Scaled errors ``sqrt(N p) * error`` and the log-log slope against ``N p``.

    ``entries`` are ``(n_bar, p_bar, error)`` triples. Errors at or below
    ``floor`` are dropped with a note.
    """
    entries = sorted(entries, key=lambda e: e[0] * e[1])
    notes = []
    kept = []
    for n, p, e in entries:
        if not e > floor:
            notes.append(f"dropped N={n}, p={p}: error {e} below floor")
        else:
            kept.append((n, p, e))
    if len(kept) < 3:
        raise ValueError("need at least three usable rows for a rate fit")
    n_bar, p_bar, err = (np.array(c, dtype=float) for c in zip(*kept))
    scale = n_bar * p_bar
    if np.any(np.diff(scale) <= 0):
        raise ValueError("N*p must be strictly increasing across rows")
    slope, intercept = np.polyfit(np.log(scale), np.log(err), 1)
    return RateTable(n_bar, p_bar, err, np.sqrt(scale) * err, float(slope), float(intercept), notes)


# ---------------------------------------------------------------------------
# bounded-Lipschitz surrogate


@dataclass(frozen=True)
class BLDictionary:
    """Test functions with BL norm <= 1 on each input coordinate.

    Ramps ``clip(x_c - s, -1, 1)``, waves ``sin/cos(w x_c)`` with ``|w| <= 1``
    and the constant 1 (which sees mass deficits of sub-probability measures).
    """

    shifts: tuple = tuple(np.linspace(-3.0, 3.0, 13))
    freqs: tuple = (0.25, 0.5, 1.0)

    def evaluate(self, points):
        x = np.asarray(points, dtype=float)
        x = x.reshape(len(x), -1)
        cols = [np.ones((len(x), 1))]
        s = np.asarray(self.shifts)
        w = np.asarray(self.freqs)
        for c in range(x.shape[1]):
            xc = x[:, c:c + 1]
            cols.append(np.clip(xc - s, -1.0, 1.0))
            cols.append(np.sin(xc * w))
            cols.append(np.cos(xc * w))
        return np.concatenate(cols, axis=1)


def dbl_surrogate(m1, m2, dictionary=None):
    """Largest gap ``|<f, m1> - <f, m2>|`` over the dictionary; a lower bound on d_BL."""
    dictionary = dictionary or BLDictionary()

    def moments(m):
        if len(m.weights) == 0:
            return None
        return m.weights @ dictionary.evaluate(m.points)

    a, b = moments(m1), moments(m2)
    if a is None and b is None:
        return 0.0
    if a is None:
        a = np.zeros_like(b)
    if b is None:
        b = np.zeros_like(a)
    return float(np.abs(a - b).max())


# ---------------------------------------------------------------------------
# propagation of chaos


@dataclass(frozen=True)
class CovarianceEstimate:
    value: float
    se: float
    n_pairs: int
    replications: int

    @property
    def z(self):
        return self.value / self.se if self.se > 0 else np.inf


def poc_cross_covariance(phi_values, psi_values, pairs, same_particle=False):
    """Covariance across replications of ``phi(Z^i)`` and ``psi(Z^j)``, pooled over pairs.

    ``phi_values[r, i]`` is ``phi`` applied to particle ``i`` in replication
    ``r``. The standard error comes from the spread of the pair-pooled
    products across (independent) replications.
    """
    a = np.asarray(phi_values, dtype=float)
    b = np.asarray(psi_values, dtype=float)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if not same_particle and np.any(pairs[:, 0] == pairs[:, 1]):
        raise ValueError("pairs must use distinct particles")
    r = a.shape[0]
    if r < 2:
        raise ValueError("need at least two replications")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    q = (a[:, pairs[:, 0]] * b[:, pairs[:, 1]]).mean(axis=1) * r / (r - 1)
    return CovarianceEstimate(float(q.mean()), float(q.std(ddof=1) / np.sqrt(r)), len(pairs), r)


def all_pairs(indices):
    idx = list(indices)
    return [(i, j) for a, i in enumerate(idx) for j in idx[a + 1:]]
