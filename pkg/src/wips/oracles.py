"""Closed forms and Monte Carlo checks for binomial inverse moments,
normalised neighbour sums and degree tails."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

from . import rng as rngmod


@dataclass(frozen=True)
class BinomialSpec:
    n: int
    p: float

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")

    @property
    def q(self):
        return 1.0 - self.p


@dataclass(frozen=True)
class MomentValue:
    value: float
    exact: bool


def _tail_ratio(spec):
    """``(1 - q^{n+1}) / p`` evaluated stably; its p -> 0 limit is ``n + 1``."""
    n, p = spec.n, spec.p
    if p == 0.0:
        return float(n + 1)
    return float(-np.expm1((n + 1) * np.log1p(-p)) / p) if p < 1.0 else 1.0


def binomial_inverse_moment(spec, shift=1, power=1):
    """``E (X + shift)^{-power}`` for ``X ~ Bin(n, p)``: exact for ``(1, 1)``, else an upper bound."""
    if shift < 1 or power < 1:
        raise ValueError("shift and power must be at least 1")
    n, p = spec.n, spec.p
    if shift == 1 and power == 1:
        return MomentValue(_tail_ratio(spec) / (n + 1), True)
    if power == 1:
        return MomentValue(_tail_ratio(spec) / (n + shift) if p > 0 else np.inf, False)
    # (X + shift)^-power <= (X + 1)^-power
    if p == 0:
        return MomentValue(np.inf, False)
    return MomentValue(float(power ** power / ((n + 1) * p) ** power), False)


def binomial_inverse_moment_exact(spec, shift=1, power=1):
    """The same expectation by summing the pmf."""
    k = np.arange(spec.n + 1)
    pmf = binom.pmf(k, spec.n, spec.p)
    return float(np.sum(pmf / (k + shift) ** power))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    name: str
    mean: float
    se: float
    bound: float

    @property
    def margin(self):
        return float(self.bound + 3 * self.se - self.mean)

    @property
    def ok(self):
        return bool(self.margin >= 0)

    def row(self):
        return {"check": self.name, "empirical": self.mean, "se": self.se, "bound": self.bound,
                "margin": self.margin, "ok": self.ok}


def _grouped_ratio_sum(numer, counts, scale=1, denom_scale=1):
    """``sum_k scale * numer_k / (denom_scale * counts_k)`` per row, grouping equal counts.

    Rows with one distinct count reduce to a single integer division, so
    complete graphs give exact results.
    """
    out = np.empty(len(counts))
    for r in range(len(counts)):
        c = counts[r]
        ok = c > 0
        vals, inv = np.unique(c[ok], return_inverse=True)
        sums = np.bincount(inv, weights=numer[r][ok], minlength=len(vals))
        out[r] = float(np.sum((scale * sums) / (denom_scale * vals)))
    return out


def _mean_se(x):
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def neighbor_sum_checks(n_alpha, n_gamma, p, replications, seed=0, chunk=256):
    """Second moments of the normalised neighbour sums against their bounds.

    ``first``: ``sum_k N_g zeta_{k, i_g} / (N_a N_{k,g}) 1{N_{k,g} > 0} - 1`` over
    ``k`` in type ``alpha`` with ``N_{k,g}`` counting ``k``'s neighbours in a
    different type ``gamma``. ``second``: ``sum_k zeta_{k, i_a} / N_{k,a} - 1``
    within type ``alpha``, self loops on.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if n_alpha < 2 or n_gamma < 2:
        raise ValueError("type counts must be at least 2")
    first, second = [], []
    for lo in range(0, replications, chunk):
        r = min(chunk, replications - lo)
        g = rngmod.substream(seed, rngmod.MONTE_CARLO, 52, lo)
        cross = g.random((r, n_alpha, n_gamma)) < p
        deg = cross.sum(axis=2)
        s1 = _grouped_ratio_sum(cross[:, :, 0].astype(float), deg, n_gamma, n_alpha)
        first.append((s1 - 1.0) ** 2)
        u = g.random((r, n_alpha, n_alpha)) < p
        within = np.triu(u, 1)
        within = within | within.transpose(0, 2, 1)
        within[:, np.arange(n_alpha), np.arange(n_alpha)] = True
        s2 = _grouped_ratio_sum(within[:, :, 0].astype(float), within.sum(axis=2))
        second.append((s2 - 1.0) ** 2)
    m1, e1 = _mean_se(np.concatenate(first))
    m2, e2 = _mean_se(np.concatenate(second))
    return [BoundCheck("cross_type", m1, e1, float(4 / (n_alpha * p) + 2 * np.exp(-n_gamma * p))),
            BoundCheck("same_type", m2, e2, 3 / (n_alpha * p))]


def degree_threshold(n, k):
    return float(np.sqrt(k * (n - 1) * np.log(n)))


def degree_tail_check(n, p, k, replications, seed=0, chunk=1 << 20):
    """Frequency of ``|Y - N p| > C_N(k) + 1`` for ``Y = 1 + Bin(N-1, p)`` against ``2 / N^{2k}``."""
    if not k > 0:
        raise ValueError("k must be positive")
    thr = degree_threshold(n, k) + 1.0
    hits = 0
    for lo in range(0, replications, chunk):
        r = min(chunk, replications - lo)
        y = 1 + rngmod.substream(seed, rngmod.MONTE_CARLO, 53, lo).binomial(n - 1, p, size=r)
        hits += int(np.count_nonzero(np.abs(y - n * p) > thr))
    f = hits / replications
    return BoundCheck("degree_tail", f, float(np.sqrt(f * (1 - f) / replications)), 2.0 / n ** (2 * k))
