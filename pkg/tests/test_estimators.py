import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wips.config import Kernel, ScenarioConfig, kernel_registry_lookup
from wips.estimators import (Centering, NearSingularError, TestFunction, coupling_error, dbl_surrogate,
                             fluctuation_field, generating_check, girsanov_functionals, incomplete_u,
                             lln_rate_table, mwi_product, nystrom_covariance, pair_kernels, pair_mean,
                             poc_cross_covariance, u_statistic, variance_targets)
from wips.graph import EdgeTrajectory
from wips.particles import EmpiricalMeasure, PathEnsemble, run_replications, simulate_coupled, simulate_mean_field

IDENT = {"name": "identity_diffusion", "params": []}
SINE = {"name": "sine_coupling", "params": [1.0]}


def scenario(drift=SINE, p=0.5, **kw):
    return ScenarioConfig(N=40, drift=drift, diffusion=IDENT, edges={"mode": "static", "prob0": p}, steps=20, **kw)


def limit(cfg, n=40, stream=0):
    return simulate_mean_field(cfg, n, stream=stream)


# ---------------------------------------------------------------------------
# coupling errors and rate tables


def test_coupling_error_zero_when_paths_agree():
    ens = limit(scenario())
    same = PathEnsemble(ens.grid, ens.membership, ens.x0, ens.dW, Z=ens.X, X=ens.X)
    err = coupling_error(same)
    assert err.mean_sup_sq == 0.0 and err.mean_sup == 0.0


def test_coupling_error_needs_both_systems():
    with pytest.raises(ValueError):
        coupling_error(limit(scenario()))


def test_coupling_error_positive_with_interaction():
    err = coupling_error(simulate_coupled(scenario()))
    assert np.all(err.sup_sq >= 0) and err.mean_sup_sq > 0
    assert np.allclose(err.sup ** 2, err.sup_sq)


def test_rate_table_constant_error():
    t = lln_rate_table([(100, 0.5, 0.2), (200, 0.5, 0.2), (400, 0.5, 0.2)])
    assert t.slope == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(t.scaled) > 0)


def test_rate_table_half_power_synthetic():
    t = lln_rate_table([(n, 0.5, 3.0 / np.sqrt(n * 0.5)) for n in (128, 256, 512, 1024)])
    assert t.slope == pytest.approx(-0.5)
    assert np.allclose(t.scaled, 3.0) and t.variation == pytest.approx(1.0)


def test_rate_table_drops_zero_rows_and_validates():
    t = lln_rate_table([(100, 0.5, 0.0), (200, 0.5, 0.3), (400, 0.5, 0.2), (800, 0.5, 0.1)])
    assert len(t.rows()) == 3 and t.notes
    with pytest.raises(ValueError):
        lln_rate_table([(100, 0.5, 0.1), (200, 0.5, 0.1)])
    with pytest.raises(ValueError):
        lln_rate_table([(100, 0.5, 0.1), (100, 0.5, 0.2), (200, 0.5, 0.1)])


# ---------------------------------------------------------------------------
# BL surrogate and chaos covariances


def _measure(points):
    pts = np.asarray(points, float).reshape(len(points), -1)
    return EmpiricalMeasure(pts, np.full(len(pts), 1.0 / max(len(pts), 1)))


def test_dbl_identical_samples():
    x = np.random.default_rng(0).normal(size=50)
    assert dbl_surrogate(_measure(x), _measure(x.copy())) == 0.0


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=30), st.lists(st.floats(-20, 20), min_size=1, max_size=30))
def test_dbl_at_most_two(a, b):
    assert 0.0 <= dbl_surrogate(_measure(a), _measure(b)) <= 2.0


def test_dbl_zero_measure_sees_mass():
    empty = EmpiricalMeasure(np.zeros((0, 1)), np.zeros(0))
    assert dbl_surrogate(empty, empty) == 0.0
    assert dbl_surrogate(empty, _measure([0.3, 1.0])) == pytest.approx(1.0)


def test_poc_independent_particles():
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(400, 10))
    est = poc_cross_covariance(vals, vals, [(0, 1), (2, 3), (4, 5)])
    assert abs(est.value) <= 3 * est.se
    with pytest.raises(ValueError):
        poc_cross_covariance(vals, vals, [(1, 1)])
    with pytest.raises(ValueError):
        poc_cross_covariance(vals[:1], vals[:1], [(0, 1)])


def test_poc_same_particle_variance():
    vals = np.random.default_rng(5).normal(size=(300, 4))
    est = poc_cross_covariance(vals, vals, [(0, 0)], same_particle=True)
    assert est.value > 0 and est.value == pytest.approx(1.0, abs=0.3)


# ---------------------------------------------------------------------------
# fluctuation fields


def test_fluctuation_field_trivial_cases():
    ens = simulate_coupled(scenario())
    assert fluctuation_field(ens, lambda p: np.zeros(len(p))) == 0.0
    one = simulate_coupled(scenario().replace(N=1))
    phi = TestFunction("tanh_terminal", (0, 2.0))
    assert fluctuation_field(one, phi) == pytest.approx(float(phi(one.Z)[0]))
    two = simulate_coupled(scenario().replace(N=4, membership={"counts": [2, 2]}))
    with pytest.raises(ValueError):
        fluctuation_field(two, phi)


def test_fluctuation_variance_without_interaction():
    # x0 ~ N(0, 1) plus W_1 ~ N(0, 1): terminal value has variance 2
    cfg = scenario(drift={"name": "constant", "params": [0.0]}).replace(N=25, replications=600)
    phi = TestFunction("terminal")
    eta = np.array(run_replications(cfg, lambda e: fluctuation_field(e, phi), coupled=False))
    r = len(eta)
    assert abs(eta.var(ddof=1) - 2.0) <= 4 * 2.0 * np.sqrt(2 / (r - 1))


def test_test_function_centring():
    ref = limit(scenario(), 500).X
    phi = TestFunction("cos_terminal").centre(ref)
    assert phi.centred and abs(phi(ref).mean()) < 1e-14
    with pytest.raises(KeyError):
        TestFunction("nope")


# ---------------------------------------------------------------------------
# pair kernels and variance targets


def test_y_free_kernel_gives_zero_pair_kernels():
    cfg = scenario(drift={"name": "x_only_tanh", "params": [1.0]})
    cache = pair_kernels(limit(cfg, 30), cfg.kernel_set().drift[0][0])
    assert np.abs(cache.H).max() < 1e-14 and np.abs(cache.l).max() < 1e-14
    assert np.abs(cache.lam).max() < 1e-14


def test_pair_kernel_symmetries():
    cfg = scenario()
    cache = pair_kernels(limit(cfg, 30), cfg.kernel_set().drift[0][0], marginal=limit(cfg, 200, 1).X)
    assert np.array_equal(cache.hsym, cache.hsym.T)
    assert np.allclose(cache.l, cache.l.T, atol=1e-14)
    assert np.all(np.diag(cache.l) >= 0)


def test_pair_kernels_reject_mismatched_grid():
    cfg = scenario()
    with pytest.raises(ValueError):
        pair_kernels(limit(cfg, 10), cfg.kernel_set().drift[0][0], marginal=limit(cfg.replace(steps=10), 10).X)


def _general(kernel):
    """The same kernel without its factorisation, to exercise the general path."""
    return Kernel(kernel.name, kernel.params, kernel.dim, "drift", kernel.bound, func=kernel.__call__)


def test_centering_rows_vanish_on_marginal():
    k = kernel_registry_lookup("sine_coupling", [1.0], 1)
    marg = limit(scenario(), 100).X
    for c in (Centering(k, marg), Centering(_general(k), marg)):
        for m in (0, 10, 20):
            rows = c.matrix(m, marg[:7, m], marg[:, m]).mean(axis=1)
            assert np.abs(rows).max() < 1e-14


def test_factored_and_general_paths_agree():
    k = kernel_registry_lookup("sine_coupling", [1.0], 1)
    cfg = scenario()
    lim, marg = limit(cfg, 25), limit(cfg, 60, 1).X
    fast = pair_kernels(lim, k, marginal=marg)
    slow = pair_kernels(lim, _general(k), marginal=marg)
    assert np.allclose(fast.H, slow.H, atol=1e-12)
    assert np.allclose(fast.lam, slow.lam, atol=1e-12)
    assert np.allclose(fast.l, slow.l, atol=1e-12)


def test_variance_targets():
    grid = np.linspace(0, 1, 11)
    lam = np.linspace(1, 2, 11)
    assert variance_targets(lam, 1.0, grid).sigma2 == 0.0
    vt = variance_targets(lam, 0.5, grid)
    assert vt.sigma2 == pytest.approx(vt.int_lam) and vt.int_lam == pytest.approx(np.dot(lam[:-1], np.diff(grid)))
    with pytest.raises(ValueError):
        variance_targets(lam, np.r_[0.5 * np.ones(10), 0.0], grid)


def test_constant_kernel_has_no_lambda():
    cfg = scenario(drift={"name": "constant", "params": [0.7]})
    cache = pair_kernels(limit(cfg, 20), cfg.kernel_set().drift[0][0])
    assert variance_targets(cache.lam, 0.5, cache.grid).sigma2 == pytest.approx(0.0, abs=1e-14)


def test_pair_mean_constant_and_se():
    pm = pair_mean(np.full((6, 6), 2.5))
    assert pm.value == 2.5 and pm.se == 0.0


# ---------------------------------------------------------------------------
# symmetric statistics and multiple Wiener integrals


def test_u_statistic_examples():
    xy = lambda x, y: x * y
    assert u_statistic([2.0, 5.0], xy, 2)[0] == 10.0
    assert u_statistic([2.0], xy, 2) == (0.0, 0.0)
    u, scaled = u_statistic([1.0, 2.0, 3.0], xy, 2)
    assert u == 11.0 and scaled == pytest.approx(11.0 / 3)


def test_u_statistic_order_one_is_field():
    x = np.random.default_rng(2).normal(size=17)
    u, scaled = u_statistic(x, lambda a: np.tanh(a), 1)
    assert u == pytest.approx(np.tanh(x).sum()) and scaled == pytest.approx(np.tanh(x).sum() / np.sqrt(17))


def test_mwi_low_orders():
    i1, h2 = 1.7, 0.4
    assert mwi_product(i1, h2, 0) == 1.0
    assert mwi_product(i1, h2, 1) == i1
    assert mwi_product(i1, h2, 2) == pytest.approx(i1 ** 2 - h2)
    assert mwi_product(i1, h2, 3) == pytest.approx(i1 ** 3 - 3 * h2 * i1)
    with pytest.raises(ValueError):
        mwi_product(i1, -1.0, 2)


@settings(max_examples=200)
@given(st.floats(-3, 3), st.floats(0, 4), st.floats(-0.5, 0.5))
def test_generating_identity_within_tail_bound(i1, h2, t):
    assert generating_check(i1, h2, t).ok


# ---------------------------------------------------------------------------
# edge fluctuation statistic and change-of-measure functionals


def _center(cfg, n=200):
    return Centering(cfg.kernel_set().drift[0][0], limit(cfg, n, 9).X)


def test_incomplete_u_complete_graph_is_zero():
    cfg = scenario(p=1.0)
    assert incomplete_u(limit(cfg), EdgeTrajectory(cfg), 1.0, _center(cfg)) == 0.0


@pytest.mark.parametrize("edges", [{"mode": "static", "prob0": 0.4},
                                   {"mode": "markov", "prob0": 0.4, "rate_on": 1.0, "rate_off": 1.5}])
def test_y_free_gives_zero_statistics(edges):
    cfg = scenario(drift={"name": "x_only_tanh", "params": [1.0]}).replace(edges=edges)
    lim, traj, center = limit(cfg), EdgeTrajectory(cfg), _center(cfg)
    assert abs(incomplete_u(lim, traj, 0.4, center)) < 1e-12
    j = girsanov_functionals(lim, traj, 0.4, center, np.zeros(21), cfg.kernel_set())
    assert max(abs(j.J1), abs(j.J2), abs(j.J1_tilde), abs(j.J2_tilde)) < 1e-12


def test_incomplete_u_matches_loop_in_markov_mode():
    # a constant-in-time markov chain (zero rates) must agree with the static shortcut
    stat = scenario(p=0.5)
    lim, center = limit(stat), _center(stat)
    u_static = incomplete_u(lim, EdgeTrajectory(stat), 0.5, center)
    traj = EdgeTrajectory(stat)
    traj.static = False
    traj.states = traj.states * 21
    assert incomplete_u(lim, traj, 0.5, center) == pytest.approx(u_static, rel=1e-12)


def test_girsanov_basic_properties():
    cfg = scenario()
    lim, traj, center = limit(cfg), EdgeTrajectory(cfg), _center(cfg)
    j = girsanov_functionals(lim, traj, 0.5, center, center.lam_from(limit(cfg, 200, 9).X), cfg.kernel_set())
    assert j.J2 >= 0 and np.isfinite(j.J2_tilde)
    assert j.log_density == j.J1 - 0.5 * j.J2
    with pytest.raises(ValueError):
        girsanov_functionals(lim, traj, 0.0, center, np.zeros(21))
    scaled = cfg.replace(diffusion={"name": "scaled_identity", "params": [2.0]})
    with pytest.raises(ValueError):
        girsanov_functionals(lim, traj, 0.5, center, np.zeros(21), scaled.kernel_set())


# ---------------------------------------------------------------------------
# Nystrom covariance


def test_nystrom_without_kernel_is_inner_product():
    rng = np.random.default_rng(3)
    phi, psi = rng.normal(size=50), rng.normal(size=50)
    assert nystrom_covariance(np.zeros((50, 50)), phi, psi) == pytest.approx(phi @ psi / 50)
    assert nystrom_covariance(np.zeros((50, 50)), phi) >= 0


def test_nystrom_rank_one_orientation():
    # H[r, s] = a_r b_s so (A f)(w_s) = b_s mean(a f); the solution is phi + c b
    rng = np.random.default_rng(6)
    r = 40
    a, b, phi = rng.normal(size=r), rng.normal(size=r), rng.normal(size=r)
    c = np.mean(a * phi) / (1 - np.mean(a * b))
    u = phi + c * b
    assert nystrom_covariance(np.outer(a, b), phi) == pytest.approx(u @ u / r, rel=1e-12)
    # the transposed orientation gives a different answer
    c_t = np.mean(b * phi) / (1 - np.mean(a * b))
    assert nystrom_covariance(np.outer(a, b), phi) != pytest.approx((phi + c_t * a) @ (phi + c_t * a) / r)


def test_nystrom_near_singular():
    with pytest.raises(NearSingularError):
        nystrom_covariance(10 * np.eye(10), np.ones(10))
