"""Scenario definitions: membership, kernel registry, edge models, grids."""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# membership


@dataclass(frozen=True)
class MembershipMap:
    """Vertices ``0..N-1`` in contiguous type blocks (types are 0-based)."""

    counts: tuple

    def __post_init__(self):
        if len(self.counts) == 0 or any(int(c) < 1 for c in self.counts):
            raise ConfigError(f"every type needs at least one vertex, got {self.counts}")

    @property
    def n(self):
        return int(sum(self.counts))

    @property
    def n_types(self):
        return len(self.counts)

    @property
    def min_count(self):
        return int(min(self.counts))

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.counts)]).astype(int)

    def block(self, alpha):
        o = self.offsets
        return slice(int(o[alpha]), int(o[alpha + 1]))

    @property
    def assignments(self):
        return np.repeat(np.arange(self.n_types), self.counts)

    @property
    def proportions(self):
        return np.asarray(self.counts, dtype=float) / self.n


def largest_remainder(proportions, n):
    """Integer counts summing to ``n``; remainders ties go to the lower type index."""
    p = np.asarray(proportions, dtype=float)
    raw = p * n
    base = np.floor(raw).astype(int)
    short = n - int(base.sum())
    order = sorted(range(len(p)), key=lambda a: (-(raw[a] - base[a]), a))
    for a in order[:short]:
        base[a] += 1
    return tuple(int(c) for c in base)


def build_membership(spec, n):
    """Block membership from ``{"counts": [...]}`` or ``{"proportions": [...]}``.

    Proportions are turned into counts with the largest-remainder rule, so
    ``(0.5, 0.5)`` with ``n=5`` gives ``(3, 2)``.
    """
    n = int(n)
    if n < 1:
        raise ConfigError("N must be positive")
    if "counts" in spec:
        counts = tuple(int(c) for c in spec["counts"])
        if sum(counts) != n:
            raise ConfigError(f"counts {counts} do not sum to N={n}")
    elif "proportions" in spec:
        props = [float(x) for x in spec["proportions"]]
        if any(x <= 0 for x in props) or abs(sum(props) - 1.0) > 1e-9:
            raise ConfigError(f"proportions must be positive and sum to 1, got {props}")
        counts = largest_remainder(props, n)
    else:
        raise ConfigError("membership spec needs 'counts' or 'proportions'")
    return MembershipMap(counts)


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True, eq=False)
class Kernel:
    """An interaction kernel ``(x, y) -> R^d``.

    Drift kernels return vectors. Diffusion kernels are restricted to diagonal
    matrices and return the diagonal; ``matrix`` expands it.

    ``left``/``right`` give an exact factorisation
    ``kernel(x, y) = sum_k left(x)[..., k, :] * right(y)[..., k, :]``,
    which turns neighbour averages into adjacency matrix products.
    ``y_free`` marks kernels that do not depend on ``y``.
    """

    name: str
    params: tuple
    dim: int
    role: str
    bound: float
    func: Callable
    left: Optional[Callable] = None
    right: Optional[Callable] = None
    y_free: bool = False

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return self.func(x, y)

    def matrix(self, x, y):
        diag = self(x, y)
        if self.role != "diffusion":
            raise TypeError("matrix() is only defined for diffusion kernels")
        return diag[..., :, None] * np.eye(self.dim)

    @property
    def factored(self):
        return self.left is not None

    def spec(self):
        return {"name": self.name, "params": list(self.params)}


L_CAP = 1e3

# name -> (role, builder(params, d) -> Kernel, n_params, doc)
_REGISTRY = {}


def register(name, role, n_params, doc):
    def deco(builder):
        _REGISTRY[name] = (role, builder, n_params, doc)
        return builder
    return deco


def _ones_like_k(x, k=1):
    return np.ones(x.shape[:-1] + (k, x.shape[-1]))


@register("constant", "drift", 1, "b(x,y) = a in every component")
def _constant(params, d):
    (a,) = params
    return Kernel(
        "constant", (a,), d, "drift", abs(a) * np.sqrt(d),
        func=lambda x, y: np.full(x.shape, float(a)),
        left=lambda x: float(a) * _ones_like_k(x),
        right=lambda y: _ones_like_k(y),
        y_free=True,
    )


@register("x_only_tanh", "drift", 1, "b(x,y) = a*tanh(x) componentwise")
def _x_only_tanh(params, d):
    (a,) = params
    return Kernel(
        "x_only_tanh", (a,), d, "drift", abs(a) * max(np.sqrt(d), 1.0),
        func=lambda x, y: a * np.tanh(x),
        left=lambda x: (a * np.tanh(x))[..., None, :],
        right=lambda y: _ones_like_k(y),
        y_free=True,
    )


@register("sine_coupling", "drift", 1, "b(x,y) = a*sin(y-x) componentwise")
def _sine_coupling(params, d):
    (a,) = params
    return Kernel(
        "sine_coupling", (a,), d, "drift", abs(a) * max(np.sqrt(d), 1.0),
        func=lambda x, y: a * np.sin(y - x),
        # sin(y-x) = cos(x) sin(y) - sin(x) cos(y)
        left=lambda x: np.stack([a * np.cos(x), -a * np.sin(x)], axis=-2),
        right=lambda y: np.stack([np.sin(y), np.cos(y)], axis=-2),
    )


@register("clipped_y", "drift", 1, "b(x,y) = clip(y, -B, B) componentwise")
def _clipped_y(params, d):
    (bound,) = params
    return Kernel(
        "clipped_y", (bound,), d, "drift", max(abs(bound) * np.sqrt(d), 1.0),
        func=lambda x, y: np.clip(y, -bound, bound),
        left=lambda x: _ones_like_k(x),
        right=lambda y: np.clip(y, -bound, bound)[..., None, :],
    )


@register("clipped_ou", "drift", 1, "b(x,y) = -clip(x, -B, B) componentwise (OU inside |x|<=B)")
def _clipped_ou(params, d):
    (bound,) = params
    return Kernel(
        "clipped_ou", (bound,), d, "drift", max(abs(bound) * np.sqrt(d), 1.0),
        func=lambda x, y: -np.clip(x, -bound, bound),
        left=lambda x: -np.clip(x, -bound, bound)[..., None, :],
        right=lambda y: _ones_like_k(y),
        y_free=True,
    )


@register("identity_diffusion", "diffusion", 0, "sigma(x,y) = I_d")
def _identity_diffusion(params, d):
    return Kernel(
        "identity_diffusion", (), d, "diffusion", 1.0,
        func=lambda x, y: np.ones(x.shape),
        left=lambda x: _ones_like_k(x),
        right=lambda y: _ones_like_k(y),
        y_free=True,
    )


@register("scaled_identity", "diffusion", 1, "sigma(x,y) = s*I_d")
def _scaled_identity(params, d):
    (s,) = params
    return Kernel(
        "scaled_identity", (s,), d, "diffusion", abs(s),
        func=lambda x, y: np.full(x.shape, float(s)),
        left=lambda x: float(s) * _ones_like_k(x),
        right=lambda y: _ones_like_k(y),
        y_free=True,
    )


@register("sine_modulated_diffusion", "diffusion", 1,
          "sigma(x,y) = s*(1 + sin(y-x)/2) on the diagonal")
def _sine_modulated(params, d):
    (s,) = params
    return Kernel(
        "sine_modulated_diffusion", (s,), d, "diffusion", 1.5 * abs(s),
        func=lambda x, y: s * (1.0 + 0.5 * np.sin(y - x)),
        left=lambda x: np.stack([s * np.ones(x.shape), 0.5 * s * np.cos(x), -0.5 * s * np.sin(x)], axis=-2),
        right=lambda y: np.stack([np.ones(y.shape), np.sin(y), np.cos(y)], axis=-2),
    )


def registry_names(role=None):
    return sorted(n for n, entry in _REGISTRY.items() if role is None or entry[0] == role)


def registry_entries():
    return {n: {"role": r, "n_params": k, "doc": doc} for n, (r, _, k, doc) in sorted(_REGISTRY.items())}


def kernel_registry_lookup(name, params=(), d=1, cap=L_CAP):
    """Build a registry kernel; its ``bound`` is the analytic BL norm.

    Norms: Euclidean on vectors, spectral on (diagonal) matrices, and the sum
    metric ``|x-x'| + |y-y'|`` on the pair space for Lipschitz quotients.
    """
    if name not in _REGISTRY:
        raise ConfigError(f"unknown kernel {name!r}; known: {registry_names()}")
    role, builder, n_params, _ = _REGISTRY[name]
    params = tuple(float(p) for p in params)
    if len(params) != n_params:
        raise ConfigError(f"kernel {name!r} takes {n_params} parameter(s), got {len(params)}")
    if int(d) < 1:
        raise ConfigError("dimension must be positive")
    kern = builder(params, int(d))
    if not np.isfinite(kern.bound) or kern.bound > cap:
        raise ConfigError(f"kernel {name!r} with params {params} has bound {kern.bound} > cap {cap}")
    return kern


@dataclass(frozen=True)
class BLEstimate:
    sup: float
    lipschitz: float
    bound: float
    tolerance: float

    @property
    def value(self):
        return max(self.sup, self.lipschitz)

    @property
    def violation(self):
        return self.value > self.bound * (1.0 + self.tolerance)


def validate_bl_norm(kernel, grid, tolerance=1e-9, chunk=512):
    """Sampled BL norm of ``kernel`` over the points ``grid`` of shape ``(n, 2d)``.

    Each row is a pair ``(x, y)``. Returns sup norm and largest Lipschitz
    quotient over distinct rows; a lower bound for the true BL norm.
    """
    g = np.asarray(grid, dtype=float)
    d = kernel.dim
    if g.ndim != 2 or g.shape[1] != 2 * d or len(g) == 0:
        raise ConfigError(f"grid must have shape (n, {2 * d})")
    vals = kernel(g[:, :d], g[:, d:])
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"kernel {kernel.name!r} is not finite on the grid")
    # diagonal-matrix spectral norm is the max |entry|; vector norm is Euclidean
    if kernel.role == "diffusion":
        norms = np.abs(vals).max(axis=1)
    else:
        norms = np.linalg.norm(vals, axis=1)
    lip = 0.0
    for s in range(0, len(g), chunk):
        gi, vi = g[s:s + chunk], vals[s:s + chunk]
        dist = (np.linalg.norm(gi[:, None, :d] - g[None, :, :d], axis=-1)
                + np.linalg.norm(gi[:, None, d:] - g[None, :, d:], axis=-1))
        dv = vi[:, None, :] - vals[None, :, :]
        if kernel.role == "diffusion":
            dnorm = np.abs(dv).max(axis=-1)
        else:
            dnorm = np.linalg.norm(dv, axis=-1)
        mask = dist > 0
        if mask.any():
            lip = max(lip, float((dnorm[mask] / dist[mask]).max()))
    return BLEstimate(float(norms.max()), lip, float(kernel.bound), tolerance)


def uniform_pair_grid(lo, hi, n, d=1):
    """All pairs ``(x, y)`` with each coordinate on an ``n``-point uniform grid."""
    axis = np.linspace(lo, hi, n)
    mesh = np.meshgrid(*([axis] * (2 * d)), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class KernelSet:
    """Drift and diffusion kernels for every ordered type pair."""

    drift: tuple
    diffusion: tuple
    dim: int

    @property
    def n_types(self):
        return len(self.drift)

    @property
    def bound(self):
        return max(k.bound for row in self.drift + self.diffusion for k in row)

    @classmethod
    def uniform(cls, drift, diffusion, n_types=1):
        if drift.dim != diffusion.dim:
            raise ConfigError("drift and diffusion dimensions differ")
        return cls(tuple((drift,) * n_types for _ in range(n_types)),
                   tuple((diffusion,) * n_types for _ in range(n_types)), drift.dim)

    @property
    def constant_diffusion(self):
        return all(k.y_free and k.name in ("identity_diffusion", "scaled_identity")
                   for row in self.diffusion for k in row)


# ---------------------------------------------------------------------------
# scenario files

INITIAL_LAWS = {
    "normal": "N(m, s^2) per component; params [m, s], default [0, 1]",
    "uniform": "U(a, b) per component; params [a, b], default [-1, 1]",
}


def sample_initial(law, rng, size):
    name = law.get("name", "normal")
    params = list(law.get("params", []))
    if name == "normal":
        m, s = params or [0.0, 1.0]
        return m + s * rng.standard_normal(size)
    if name == "uniform":
        a, b = params or [-1.0, 1.0]
        return rng.uniform(a, b, size)
    raise ConfigError(f"unknown initial law {name!r}")


_SCENARIO_KEYS = {
    "name", "N", "d", "membership", "drift", "diffusion", "edges",
    "initial_law", "T", "steps", "replications", "seed", "output",
}
_EDGE_KEYS = {"mode", "prob0", "rate_on", "rate_off"}


def _as_matrix(value, k, what):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((k, k), float(arr))
    if arr.shape != (k, k):
        raise ConfigError(f"{what} must be a scalar or a {k}x{k} array")
    if not np.allclose(arr, arr.T):
        raise ConfigError(f"{what} must be symmetric in the type pair")
    return arr


@dataclass
class ScenarioConfig:
    N: int
    d: int = 1
    membership: dict = field(default_factory=lambda: {"proportions": [1.0]})
    drift: object = field(default_factory=lambda: {"name": "sine_coupling", "params": [1.0]})
    diffusion: object = field(default_factory=lambda: {"name": "identity_diffusion", "params": []})
    edges: dict = field(default_factory=lambda: {"mode": "static", "prob0": 1.0})
    initial_law: object = field(default_factory=lambda: {"name": "normal", "params": [0.0, 1.0]})
    T: float = 1.0
    steps: int = 200
    replications: int = 1
    seed: int = 0
    name: str = "scenario"
    output: Optional[str] = None

    def __post_init__(self):
        self.validate()

    # -- validation ------------------------------------------------------
    def validate(self):
        if int(self.N) < 1 or int(self.d) < 1:
            raise ConfigError("N and d must be positive")
        if not (float(self.T) > 0):
            raise ConfigError("T must be positive")
        if int(self.steps) < 1:
            raise ConfigError("steps must be >= 1")
        if int(self.replications) < 1:
            raise ConfigError("replications must be >= 1")
        if int(self.seed) < 0:
            raise ConfigError("seed must be a non-negative integer")
        k = self.membership_map().n_types
        e = self.edges
        unknown = set(e) - _EDGE_KEYS
        if unknown:
            raise ConfigError(f"unknown edge keys {sorted(unknown)}")
        mode = e.get("mode", "static")
        if mode not in ("static", "markov"):
            raise ConfigError(f"edge mode must be static or markov, got {mode!r}")
        p0 = _as_matrix(e.get("prob0", 1.0), k, "prob0")
        if np.any(p0 < 0) or np.any(p0 > 1):
            raise ConfigError("edge probabilities must lie in [0, 1]")
        if mode == "markov":
            for key in ("rate_on", "rate_off"):
                if key not in e:
                    raise ConfigError(f"markov edges need {key!r}")
                if np.any(_as_matrix(e[key], k, key) <= 0):
                    raise ConfigError(f"{key} must be positive")
        self.kernel_set()

    # -- derived objects ---------------------------------------------------
    def membership_map(self):
        return build_membership(self.membership, self.N)

    def _kernel_grid(self, spec, k):
        if isinstance(spec, dict):
            rows = [[spec] * k for _ in range(k)]
        else:
            rows = spec
            if len(rows) != k or any(len(r) != k for r in rows):
                raise ConfigError(f"kernel table must be {k}x{k}")
        return tuple(tuple(kernel_registry_lookup(s["name"], s.get("params", []), self.d) for s in r)
                     for r in rows)

    def kernel_set(self):
        k = self.membership_map().n_types
        drift = self._kernel_grid(self.drift, k)
        diffusion = self._kernel_grid(self.diffusion, k)
        for row in drift:
            for kern in row:
                if kern.role != "drift":
                    raise ConfigError(f"{kern.name!r} is not a drift kernel")
        for row in diffusion:
            for kern in row:
                if kern.role != "diffusion":
                    raise ConfigError(f"{kern.name!r} is not a diffusion kernel")
        return KernelSet(drift, diffusion, int(self.d))

    def initial_laws(self):
        k = self.membership_map().n_types
        if isinstance(self.initial_law, dict):
            return [self.initial_law] * k
        if len(self.initial_law) != k:
            raise ConfigError("need one initial law per type")
        return list(self.initial_law)

    def edge_arrays(self):
        """``(mode, prob0, rate_on, rate_off)`` as K x K arrays (rates None if static)."""
        k = self.membership_map().n_types
        e = self.edges
        mode = e.get("mode", "static")
        p0 = _as_matrix(e.get("prob0", 1.0), k, "prob0")
        if mode == "markov":
            return mode, p0, _as_matrix(e["rate_on"], k, "rate_on"), _as_matrix(e["rate_off"], k, "rate_off")
        return mode, p0, None, None

    @property
    def dt(self):
        return float(self.T) / int(self.steps)

    @property
    def grid(self):
        return np.linspace(0.0, float(self.T), int(self.steps) + 1)

    # -- serialisation -----------------------------------------------------
    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - _SCENARIO_KEYS
        if unknown:
            raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
        if "N" not in data:
            raise ConfigError("scenario needs N")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return type(self).from_dict(data)

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()
