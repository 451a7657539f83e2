"""Fluctuation fields, the centred pair kernel and the limiting variance."""

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla


class NearSingularError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# path test functions


def _terminal(params):
    (c,) = params or (0,)
    return lambda p: p[:, -1, int(c)]


def _time_average(params):
    (c,) = params or (0,)
    # trapezoid on a uniform grid
    return lambda p: 0.5 * (p[:, :-1, int(c)] + p[:, 1:, int(c)]).mean(axis=1)


def _tanh_terminal(params):
    c, s = params if params else (0, 1.0)
    return lambda p: np.tanh(s * p[:, -1, int(c)])


def _cos_terminal(params):
    (c,) = params or (0,)
    return lambda p: np.cos(p[:, -1, int(c)])


TEST_FUNCTIONS = {
    "terminal": _terminal,
    "time_average": _time_average,
    "tanh_terminal": _tanh_terminal,
    "cos_terminal": _cos_terminal,
}


@dataclass(frozen=True)
class TestFunction:
    """A path functional ``phi(path)``; ``offset`` is subtracted when centred."""

    __test__ = False   # not a pytest class

    name: str
    params: tuple = ()
    offset: float = 0.0

    def __post_init__(self):
        if self.name not in TEST_FUNCTIONS:
            raise KeyError(f"unknown test function {self.name!r}; have {sorted(TEST_FUNCTIONS)}")

    @property
    def centred(self):
        return self.offset != 0.0

    def __call__(self, paths):
        paths = np.asarray(paths, dtype=float)
        return TEST_FUNCTIONS[self.name](tuple(self.params))(paths) - self.offset

    def centre(self, reference_paths):
        """Copy with the reference-sample mean subtracted."""
        raw = replace(self, offset=0.0)
        return replace(self, offset=float(raw(reference_paths).mean()))


def fluctuation_field(ens, phi, paths=None):
    """``N^{-1/2} sum_i phi(Z^i)`` for a single-type population."""
    if ens.membership.n_types != 1:
        raise ValueError("fluctuation field is defined for one type only")
    z = ens.Z if paths is None else paths
    vals = phi(z)
    return float(vals.sum() / np.sqrt(len(vals)))


def fluctuation_samples(ensembles, phi):
    """``eta^N(phi)`` for each replication in ``ensembles``."""
    return np.array([fluctuation_field(e, phi) for e in ensembles])


# ---------------------------------------------------------------------------
# centred kernel bbar_t(x, y) = b(x, y) - int b(x, z) mu_t(dz)


class Centering:
    """A drift kernel centred against a reference marginal sample per grid time.

    ``marginal`` is an ``(n, M+1, d)`` array of limit paths. For factored
    kernels only the mean of ``right`` and the second moments of ``left``
    are kept; otherwise the sample itself.
    """

    def __init__(self, kernel, marginal):
        if kernel.role != "drift":
            raise ValueError("centring applies to drift kernels")
        self.kernel = kernel
        marg = np.asarray(marginal, dtype=float)
        self.n_marginal = marg.shape[0]
        self.steps = marg.shape[1] - 1
        if kernel.factored:
            self.marginal = None
            self.rbar = kernel.right(marg).mean(axis=0)                 # (M+1, k, d)
            lz = kernel.left(marg)                                      # (n, M+1, k, d)
            self.lsecond = np.einsum("ntkc,ntjc->tckj", lz, lz) / len(marg)  # (M+1, d, k, k)
        else:
            self.marginal = marg

    @property
    def factored(self):
        return self.kernel.factored

    def left(self, x):
        return self.kernel.left(x)

    def right(self, y, m):
        """Centred right factor; ``y`` is ``(..., d)`` at grid index ``m`` (or ``(n, M+1, d)``)."""
        r = self.kernel.right(y)
        return r - (self.rbar[m] if m is not None else self.rbar)

    def _mean_term(self, x, m):
        z = self.marginal[:, m]
        acc = np.zeros(x.shape)
        for lo in range(0, len(z), 256):
            acc += self.kernel(x[..., None, :], z[lo:lo + 256]).sum(axis=-2)
        return acc / len(z)

    def __call__(self, m, x, y):
        """``bbar_{t_m}(x, y)`` with broadcasting over leading axes."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        if self.factored:
            return (self.left(x) * self.right(y, m)).sum(axis=-2)
        return self.kernel(x, y) - self._mean_term(x, m)

    def matrix(self, m, xs, ys):
        """``bbar(xs[i], ys[j])`` as an ``(n, n', d)`` array."""
        xs, ys = np.asarray(xs, float), np.asarray(ys, float)
        if self.factored:
            return np.einsum("ikc,jkc->ijc", self.left(xs), self.right(ys, m))
        return self.kernel(xs[:, None], ys[None]) - self._mean_term(xs, m)[:, None]

    def lam(self):
        """``lambda_t``: mean of ``|bbar_t(x, y)|^2`` over distinct marginal pairs.

        Only available when the marginal sample is kept or the kernel is
        factored (then pairs of the reference sample used at construction).
        """
        if self.factored:
            raise RuntimeError("use lam_from(paths) for factored kernels")
        return self.lam_from(self.marginal)

    def lam_from(self, paths):
        paths = np.asarray(paths, float)
        n = len(paths)
        out = np.empty(paths.shape[1])
        for m in range(paths.shape[1]):
            x = paths[:, m]
            if self.factored:
                lx = self.left(x)                        # (n, k, d)
                rx = self.right(x, m)
                a = np.einsum("nkc,njc->ckj", lx, lx)
                b = np.einsum("nkc,njc->ckj", rx, rx)
                total = float((a * b).sum())
                diag = float(((lx * rx).sum(axis=1) ** 2).sum())
            else:
                bm = self.matrix(m, x, x)
                total = float((bm ** 2).sum())
                diag = float((np.einsum("iic->ic", bm) ** 2).sum())
            out[m] = (total - diag) / (n * (n - 1))
        return out


def _stacked(center, paths, dw=None):
    """Per-path feature rows whose inner products give time-summed kernels."""
    x = paths[:, :-1]
    lx = center.left(x)                                  # (R, M, k, d)
    rx = center.right(x, slice(0, x.shape[1]))
    if dw is not None:
        lx = lx * dw[:, :, None, :]
    return lx.reshape(len(paths), -1), rx.reshape(len(paths), -1)


def h_matrix(center, paths, dw):
    """``H[r, s] = sum_m bbar_m(X^r_m, X^s_m) . dW^r_m`` (left-point sums)."""
    paths = np.asarray(paths, float)
    dw = np.asarray(dw, float)
    if center.factored:
        p, q = _stacked(center, paths, dw)
        return p @ q.T
    r = len(paths)
    h = np.zeros((r, r))
    for m in range(dw.shape[1]):
        x = paths[:, m]
        h += np.einsum("ijc,ic->ij", center.matrix(m, x, x), dw[:, m])
    return h


def sq_matrix(center, paths, dt):
    """``S[r, s] = sum_m |bbar_m(X^r_m, X^s_m)|^2 dt``."""
    paths = np.asarray(paths, float)
    r = len(paths)
    if center.factored:
        x = paths[:, :-1]
        lx = center.left(x)
        rx = center.right(x, slice(0, x.shape[1]))
        a = np.einsum("rmkc,rmjc->rmckj", lx, lx) * np.asarray(dt)[None, :, None, None, None]
        b = np.einsum("rmkc,rmjc->rmckj", rx, rx)
        return a.reshape(r, -1) @ b.reshape(r, -1).T
    s = np.zeros((r, r))
    for m in range(paths.shape[1] - 1):
        x = paths[:, m]
        s += (center.matrix(m, x, x) ** 2).sum(axis=-1) * dt[m]
    return s


def l_matrix(center, paths, dt, marginal=None):
    """``l[r, s] = sum_m m_m(X^r_m, X^s_m) dt`` with
    ``m_t(x, y) = int bbar_t(z, x) . bbar_t(z, y) mu_t(dz)``.

    Factored kernels use the stored second moments of ``left``; otherwise a
    marginal sample must be given (cost grows like its size times ``R^2``).
    """
    paths = np.asarray(paths, float)
    r, steps = len(paths), paths.shape[1] - 1
    if center.factored:
        x = paths[:, :-1]
        q = center.right(x, slice(0, steps))                              # (R, M, k, d)
        g = center.lsecond[:steps] * np.asarray(dt)[:, None, None, None]  # (M, d, k, k)
        a = np.einsum("rmkc,mckj->rmjc", q, g)
        return a.reshape(r, -1) @ q.reshape(r, -1).T
    marg = center.marginal if marginal is None else np.asarray(marginal, float)
    out = np.zeros((r, r))
    for m in range(steps):
        b = center.matrix(m, marg[:, m], paths[:, m])     # (n, R, d)
        out += np.einsum("zxc,zyc->xy", b, b) * dt[m] / len(marg)
    return out


@dataclass
class PairKernelCache:
    H: np.ndarray
    lam: np.ndarray
    grid: np.ndarray
    center: Centering
    paths: np.ndarray
    _l: Optional[np.ndarray] = None

    @property
    def hsym(self):
        return 0.5 * (self.H + self.H.T)

    @property
    def dt(self):
        return np.diff(self.grid)

    @property
    def l(self):
        if self._l is None:
            self._l = l_matrix(self.center, self.paths, self.dt)
        return self._l


def pair_kernels(limit, kernel, marginal=None):
    """Pair-kernel matrices on a sample of limit paths.

    ``limit`` is a :class:`PathEnsemble` whose ``X`` and ``dW`` are used;
    ``marginal`` (paths) defines the centring and defaults to ``limit.X``.
    ``lam`` is always averaged over the centring sample.
    """
    x = limit.X
    if x is None or x.shape[1] != len(limit.grid) or limit.dW.shape[1] != len(limit.grid) - 1:
        raise ValueError("limit paths and increments must sit on the ensemble grid")
    marginal = x if marginal is None else np.asarray(marginal, float)
    if marginal.shape[1] != x.shape[1]:
        raise ValueError("marginal sample is on a different grid")
    center = Centering(kernel, marginal)
    return PairKernelCache(h_matrix(center, x, limit.dW), center.lam_from(marginal),
                           np.asarray(limit.grid), center, x)


# ---------------------------------------------------------------------------
# variance targets


def _left_sum(values, grid):
    return float(np.dot(np.asarray(values)[:-1], np.diff(grid)))


@dataclass(frozen=True)
class VarianceTargets:
    lam: np.ndarray
    int_lam: float
    sigma2: float


def variance_targets(lam, p, grid):
    """``int lambda dt`` and ``sigma^2 = int (1-p)/p lambda dt`` as left-point sums.

    ``p`` is a scalar or an array on ``grid``.
    """
    lam = np.asarray(lam, float)
    p = np.broadcast_to(np.asarray(p, float), lam.shape)
    if np.any(p <= 0):
        raise ValueError("edge probability must be positive")
    return VarianceTargets(lam, _left_sum(lam, grid), _left_sum((1.0 - p) / p * lam, grid))


# ---------------------------------------------------------------------------
# Nystrom covariance


def nystrom_covariance(h, phi_values, psi_values=None, max_condition=1e10):
    """``<(I - A)^{-1} phi, (I - A)^{-1} psi>`` with ``A f(w) = int h(w', w) f(w') nu(dw')``.

    ``h`` is a :class:`PairKernelCache` or the raw ``R x R`` matrix
    ``h[r, s] = h(w_r, w_s)``; the values are the (centred) functionals at
    the same sample points.
    """
    hm = h.H if isinstance(h, PairKernelCache) else np.asarray(h, float)
    r = hm.shape[0]
    a = np.eye(r) - hm.T / r
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)    # singularity is reported below
        lu, piv = sla.lu_factor(a, check_finite=True)
    rcond, info = sla.lapack.dgecon(lu, np.linalg.norm(a, 1), norm="1")
    if info != 0 or rcond * max_condition < 1:
        raise NearSingularError(f"I - A is near singular (reciprocal condition {rcond:.3g})")
    phi = np.asarray(phi_values, float)
    u = sla.lu_solve((lu, piv), phi)
    v = u if psi_values is None else sla.lu_solve((lu, piv), np.asarray(psi_values, float))
    return float(u @ v / r)


# ---------------------------------------------------------------------------
# U-statistic mean of a symmetric pair kernel with standard error


@dataclass(frozen=True)
class PairMean:
    value: float
    se: float


def pair_mean(kmat):
    """Mean of ``K[r, s]`` over ``r != s`` with its U-statistic standard error.

    ``K`` is symmetrised first; the variance uses the usual two-term
    (Hoeffding) decomposition with plug-in components.
    """
    k = np.asarray(kmat, float)
    k = 0.5 * (k + k.T)
    r = len(k)
    off = ~np.eye(r, dtype=bool)
    vals = k[off]
    mean = vals.mean()
    g = (k.sum(axis=1) - np.diag(k)) / (r - 1)
    zeta1 = max(g.var(ddof=1) - vals.var() / (r - 1), 0.0)
    zeta2 = vals.var()
    var = 4 * (r - 2) / (r * (r - 1)) * zeta1 + 2 / (r * (r - 1)) * zeta2
    return PairMean(float(mean), float(np.sqrt(var)))
