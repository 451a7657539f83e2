"""Symmetric statistics, multiple Wiener integrals, the incomplete U-statistic
of edge fluctuations and the change-of-measure functionals."""

from dataclasses import dataclass
from itertools import combinations
from math import factorial

import numpy as np
from scipy.special import logsumexp

from .clt import h_matrix, l_matrix

# constant in |He_n(x)| <= K sqrt(n!) exp(x^2/4)
HERMITE_CONST = 1.086435


def u_statistic(sample, phi, k):
    """``sum_{i_1 < ... < i_k} phi(Y_{i_1}, ..., Y_{i_k})`` and its ``n^{-k/2}`` scaling.

    ``phi`` takes ``k`` arrays of stacked arguments and returns one value per
    row. Zero when ``n < k``; ``k = 0`` gives ``phi()`` itself.
    """
    y = np.asarray(sample)
    n = len(y)
    if k < 0:
        raise ValueError("order must be non-negative")
    if k == 0:
        u = float(phi())
    elif n < k:
        u = 0.0
    else:
        idx = np.array(list(combinations(range(n), k)), dtype=np.int64)
        u = float(np.sum(phi(*(y[idx[:, j]] for j in range(k)))))
    return u, u / n ** (k / 2) if n else u


def mwi_coefficient(k, j):
    return factorial(k) // (factorial(k - 2 * j) * 2 ** j * factorial(j))


def mwi_product(i1, h_norm_sq, k):
    """``I_k(h^{(x)k})`` from ``I_1(h)`` and ``|h|^2``: a scaled Hermite polynomial."""
    if h_norm_sq < 0:
        raise ValueError("squared norm must be non-negative")
    i1 = np.asarray(i1, dtype=float)
    out = np.zeros_like(i1)
    for j in range(k // 2 + 1):
        out = out + (-1) ** j * mwi_coefficient(k, j) * h_norm_sq ** j * i1 ** (k - 2 * j)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class GeneratingCheck:
    truncated: float
    exact: float
    bound: float

    @property
    def gap(self):
        return abs(self.truncated - self.exact)

    @property
    def ok(self):
        return self.gap <= self.bound + 1e-12 * max(1.0, abs(self.exact))


def generating_check(i1, h_norm_sq, t, order=6, tail_terms=200):
    """Compare ``sum_{k<=order} t^k/k! I_k`` with ``exp(t I_1 - t^2 |h|^2 / 2)``.

    ``bound`` dominates the neglected tail: for ``|h| > 0`` via the Hermite
    inequality, for ``h = 0`` via the exponential series.
    """
    trunc = sum(t ** k / factorial(k) * mwi_product(i1, h_norm_sq, k) for k in range(order + 1))
    exact = float(np.exp(t * i1 - 0.5 * t * t * h_norm_sq))
    ks = np.arange(order + 1, order + 1 + tail_terms)
    log_fact = np.cumsum(np.log(np.arange(1, ks[-1] + 1)))[ks - 1]
    if h_norm_sq > 0:
        hn = np.sqrt(h_norm_sq)
        # log of K exp(x^2/4) (|t| |h|)^k / sqrt(k!), summed in log space; tiny |h| gives an infinite bound
        with np.errstate(over="ignore"):
            x = i1 / hn
            logs = np.log(HERMITE_CONST) + x * x / 4 + ks * np.log(abs(t) * hn + 1e-300) - 0.5 * log_fact
    else:
        logs = ks * np.log(abs(t * i1) + 1e-300) - log_fact
    with np.errstate(over="ignore"):
        bound = float(np.exp(logsumexp(logs))) if t != 0 else 0.0
    return GeneratingCheck(float(trunc), exact, bound)


# ---------------------------------------------------------------------------
# edge fluctuation statistic and change-of-measure functionals


def _edge_states(edges, steps):
    """Dense adjacency (unit diagonal) at grid index ``m`` for ``m < steps``."""
    if edges.static:
        a = edges.at(0).dense()
        return lambda m: a
    return lambda m: edges.at(m).dense()


def _p_on_grid(p, steps):
    p = np.broadcast_to(np.asarray(p, float), (steps + 1,))
    if np.any(p <= 0):
        raise ValueError("edge probability must be positive")
    return p


def incomplete_u(limit, edges, p, center):
    """``U_N = N^{-1} sum_t sum_{i != j} (xi_ij(t) - p_t)/p_t bbar_t(X^i_t, X^j_t) . dW^i_t``.

    ``limit`` provides independent limit paths ``X`` and increments ``dW``;
    ``edges`` is an :class:`EdgeTrajectory` on the same grid; ``p`` the edge
    probability (scalar or per grid point).
    """
    x, dw = limit.X, limit.dW
    n, steps = x.shape[0], dw.shape[1]
    p = _p_on_grid(p, steps)
    off = ~np.eye(n, dtype=bool)
    if edges.static:
        xi = (edges.at(0).dense() - p[0]) / p[0]
        return float((xi * h_matrix(center, x, dw))[off].sum() / n)
    total = 0.0
    for m in range(steps):
        xi = (edges.at(m).dense() - p[m]) / p[m]
        b = np.einsum("ijc,ic->ij", center.matrix(m, x[:, m], x[:, m]), dw[:, m])
        total += (xi * b)[off].sum()
    return float(total / n)


@dataclass(frozen=True)
class GirsanovFunctionals:
    J1: float
    J2: float
    J1_tilde: float
    J2_tilde: float

    @property
    def log_density(self):
        return self.J1 - 0.5 * self.J2

    @property
    def log_density_tilde(self):
        return self.J1_tilde - 0.5 * self.J2_tilde


def girsanov_functionals(limit, edges, p, center, lam, kset=None):
    """Change-of-measure exponents on independent limit paths.

    ``J1``/``J2`` use realised neighbour counts, ``J1_tilde`` replaces them
    by ``N p``, and ``J2_tilde`` is the pair-kernel/lambda surrogate of the
    quadratic term.
    """
    if limit.membership.n_types != 1:
        raise ValueError("change-of-measure functionals are defined for one type only")
    if kset is not None:
        diff = kset.diffusion[0][0]
        if diff.name != "identity_diffusion":
            raise ValueError("change-of-measure functionals need identity diffusion")
    x, dw = limit.X, limit.dW
    grid = np.asarray(limit.grid)
    dt = np.diff(grid)
    n, steps = x.shape[0], dw.shape[1]
    p = _p_on_grid(p, steps)
    adj_at = _edge_states(edges, steps)
    j1 = j2 = j1t = 0.0
    for m in range(steps):
        a = adj_at(m)
        deg = a.sum(axis=1)
        xm = x[:, m]
        if center.factored:
            v = (center.left(xm) * np.einsum("ij,jkc->ikc", a, center.right(xm, m))).sum(axis=1)
        else:
            v = np.einsum("ij,ijc->ic", a, center.matrix(m, xm, xm))
        drive = (v * dw[:, m]).sum(axis=1)
        j1 += float((drive / deg).sum())
        j1t += float(drive.sum() / (n * p[m]))
        j2 += float(((v ** 2).sum(axis=1) / deg ** 2).sum() * dt[m])
    lmat = l_matrix(center, x, dt)
    off = ~np.eye(n, dtype=bool)
    lam = np.asarray(lam, float)
    j2t = (n - 2) / n ** 2 * float(lmat[off].sum()) + float(np.dot(lam[:-1] / p[:-1], dt))
    return GirsanovFunctionals(j1, j2, j1t, j2t)
