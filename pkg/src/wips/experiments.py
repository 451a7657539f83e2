"""Experiments behind each verification check.

Every ``*_experiment`` function returns plain rows/metrics (JSON-able
dicts); every ``check_*`` function turns stored metrics into a
:class:`CheckResult`, so checks can be re-evaluated from files on disk.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import chi2

from .config import ScenarioConfig
from .estimators.clt import (Centering, TestFunction, nystrom_covariance, pair_kernels, pair_mean,
                             sq_matrix, variance_targets)
from .estimators.lln import all_pairs, coupling_error, lln_rate_table, poc_cross_covariance
from .estimators.ustat import generating_check, girsanov_functionals, incomplete_u
from .graph import EdgeTrajectory, marginal_edge_probability, pbar
from .oracles import (BinomialSpec, binomial_inverse_moment, binomial_inverse_moment_exact,
                      degree_tail_check, neighbor_sum_checks)
from .particles import run_replications, simulate_mean_field

# reference-stream indices for limit samples that must not overlap replication streams
STREAM_CENTRING = 1 << 40
STREAM_NYSTROM = (1 << 40) + 1


@dataclass
class CheckResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"

    def to_dict(self):
        return asdict(self)


def sine_scenario(**changes):
    """The reference setting: one type, d = 1, sine coupling, identity diffusion, T = 1, 200 steps."""
    base = ScenarioConfig(N=128, drift={"name": "sine_coupling", "params": [1.0]},
                          diffusion={"name": "identity_diffusion", "params": []},
                          edges={"mode": "static", "prob0": 0.5}, T=1.0, steps=200)
    return base.replace(**changes)


def with_p(config, p):
    return config.replace(edges={**config.edges, "prob0": float(p)})


def _pbar(config):
    mode, p0, lam, mu = config.edge_arrays()
    return pbar(mode, p0, config.T, lam, mu)


def _mean_se(x):
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


# ---------------------------------------------------------------------------
# binomial inverse moments


def oracle_exactness_experiment(n_max=20, ps=tuple(np.round(np.arange(1, 11) / 10, 1)), shifts=(2, 3, 4),
                                rtol=1e-12):
    """Formula against pmf enumeration, and bound domination up to ``rtol`` (ties occur when q^{n+1} underflows)."""
    worst, violations = 0.0, []
    slack = 1.0 + rtol
    for n in range(n_max + 1):
        for p in ps:
            spec = BinomialSpec(n, float(p))
            exact = binomial_inverse_moment_exact(spec)
            worst = max(worst, abs(binomial_inverse_moment(spec).value - exact))
            if exact > slack / ((n + 1) * p):
                violations.append(("first", n, p))
            for m in shifts:
                if binomial_inverse_moment_exact(spec, shift=m) > slack * binomial_inverse_moment(spec, shift=m).value:
                    violations.append(("shift", n, p, m))
                if binomial_inverse_moment_exact(spec, power=m) > slack * binomial_inverse_moment(spec, power=m).value:
                    violations.append(("power", n, p, m))
    return {"max_abs_diff": worst, "bound_violations": len(violations), "examples": [list(map(float, v[1:])) for v in violations[:5]]}


def check_oracle_exactness(metrics, tol=1e-12):
    ok = metrics["max_abs_diff"] <= tol and metrics["bound_violations"] == 0
    return CheckResult("oracle_exactness", ok, metrics,
                       f"max |formula - pmf| = {metrics['max_abs_diff']:.2e}, "
                       f"{metrics['bound_violations']} bound violations")


def lemma_diagnostics(seed=0, neighbor_reps=20000, tail_reps=10 ** 6):
    """Neighbour-sum and degree-tail checks at their reference settings."""
    rows = [c.row() for c in neighbor_sum_checks(50, 50, 0.3, neighbor_reps, seed)]
    rows.append(degree_tail_check(500, 0.5, 1, tail_reps, seed).row())
    return rows


def check_lemma_diagnostics(rows, name="lemma_bounds"):
    ok = all(r["ok"] for r in rows)
    return CheckResult(name, ok, {"rows": rows},
                       ", ".join(f"{r['check']} {r['empirical']:.3g} <= {r['bound']:.3g} + 3SE" for r in rows))


# ---------------------------------------------------------------------------
# law of large numbers


def _coupling_summary(ens):
    err = coupling_error(ens)
    return err.mean_sup_sq, err.mean_sup


def coupling_sweep(config, ns, p_of_n, replications, threads=1):
    """Mean coupling errors per ``N`` (averaged over particles, then replications)."""
    rows = []
    for n in ns:
        cfg = with_p(config.replace(N=int(n)), p_of_n(n)).replace(replications=int(replications))
        out = np.array(run_replications(cfg, _coupling_summary, coupled=True, threads=threads))
        sq, sq_se = _mean_se(out[:, 0])
        first, first_se = _mean_se(out[:, 1])
        rows.append({"N": int(n), "p": float(p_of_n(n)), "n_bar": int(cfg.membership_map().min_count),
                     "p_bar": _pbar(cfg), "mean_sup_sq": sq, "se_sup_sq": sq_se,
                     "mean_sup": first, "se_sup": first_se, "replications": int(replications)})
    return rows


def rate_metrics(rows, column="mean_sup_sq"):
    table = lln_rate_table([(r["n_bar"], r["p_bar"], r[column]) for r in rows])
    return {"column": column, "slope": table.slope, "variation": table.variation,
            "rows": table.rows(), "notes": table.notes}


def check_lln_rate(metrics, slope_max=-0.4, max_variation=2.0):
    ok = metrics["slope"] <= slope_max and metrics["variation"] < max_variation
    return CheckResult("lln_rate", ok, metrics,
                       f"slope {metrics['slope']:.3f} (<= {slope_max}), scaled-value ratio "
                       f"{metrics['variation']:.2f} (< {max_variation}) on {metrics['column']}")


def check_strictly_decreasing(rows, column="mean_sup_sq", name="lln_decreasing"):
    vals = [r[column] for r in sorted(rows, key=lambda r: r["N"])]
    ok = all(b < a for a, b in zip(vals, vals[1:]))
    return CheckResult(name, ok, {"values": vals}, f"{column} by N: " + ", ".join(f"{v:.3e}" for v in vals))


def coupling_null_experiment(n=256, steps=200, seed=0):
    worst = 0.0
    for edges in ({"mode": "static", "prob0": 0.5},
                  {"mode": "markov", "prob0": 0.5, "rate_on": 1.0, "rate_off": 1.0}):
        cfg = sine_scenario(N=n, steps=steps, seed=seed, edges=edges,
                            drift={"name": "x_only_tanh", "params": [1.0]})
        ens = run_replications(cfg.replace(replications=2), lambda e: coupling_error(e).sup.max())
        worst = max(worst, float(max(ens)))
    return {"max_sup_abs": worst}


def check_coupling_null(metrics, tol=1e-12):
    return CheckResult("coupling_null", metrics["max_sup_abs"] <= tol, metrics,
                       f"max_i sup_t |Z - X| = {metrics['max_sup_abs']:.2e}")


# ---------------------------------------------------------------------------
# propagation of chaos


def poc_experiment(config, ns, p, replications, subset=64, threads=1):
    rows = []
    pairs = all_pairs(range(subset))
    phi = TestFunction("terminal")
    for n in ns:
        cfg = with_p(config.replace(N=int(n)), p).replace(replications=int(replications))
        vals = np.array(run_replications(cfg, lambda e: phi(e.Z[:subset]), coupled=False, threads=threads))
        est = poc_cross_covariance(vals, vals, pairs)
        rows.append({"N": int(n), "p": float(p), "covariance": est.value, "se": est.se,
                     "pairs": est.n_pairs, "replications": est.replications})
    return rows


def check_poc(rows):
    rows = sorted(rows, key=lambda r: r["N"])
    small, big = rows[0], rows[-1]
    ok = abs(big["covariance"]) < 3 * big["se"] and abs(big["covariance"]) < abs(small["covariance"])
    return CheckResult("propagation_of_chaos", ok, {"rows": rows},
                       f"N={big['N']}: |cov| {abs(big['covariance']):.2e} vs 3SE {3 * big['se']:.2e}; "
                       f"N={small['N']}: |cov| {abs(small['covariance']):.2e}")


# ---------------------------------------------------------------------------
# edge chains


def markov_marginal_experiment(p0=0.9, rate_on=1.0, rate_off=3.0, t=1.0, n_edges=10 ** 5, steps=10, seed=0):
    """Fraction of independent on/off edges that are on at time ``t``.

    The edges are the off-diagonal slots of one vertex set just large
    enough to hold ``n_edges``; only the first ``n_edges`` slots are read.
    """
    n = int(np.ceil((1 + np.sqrt(1 + 8 * n_edges)) / 2))
    cfg = ScenarioConfig(N=n, edges={"mode": "markov", "prob0": p0, "rate_on": rate_on, "rate_off": rate_off},
                         T=t, steps=steps, seed=seed)
    final = EdgeTrajectory(cfg).at(steps).upper[:n_edges]
    exact = float(marginal_edge_probability(t, p0, rate_on, rate_off))
    freq = float(final.mean())
    return {"frequency": freq, "exact": exact, "se": float(np.sqrt(exact * (1 - exact) / n_edges)),
            "edges": n_edges}


def check_markov_marginal(metrics):
    ok = abs(metrics["frequency"] - metrics["exact"]) <= 3 * metrics["se"]
    return CheckResult("markov_marginal", ok, metrics,
                       f"frequency {metrics['frequency']:.5f} vs {metrics['exact']:.5f} (3SE {3 * metrics['se']:.1e})")


def check_degree_tail(row):
    return CheckResult("degree_tail", row["ok"], row,
                       f"exceedance {row['empirical']:.2e} <= {row['bound']:.2e} + 3SE")


# ---------------------------------------------------------------------------
# fluctuations


def centring_sample(config, size=10 ** 4):
    return simulate_mean_field(config, size, stream=STREAM_CENTRING).X


def trace_experiment(config, replications=2000):
    ens = simulate_mean_field(config, replications, stream=STREAM_NYSTROM)
    cache = pair_kernels(ens, config.kernel_set().drift[0][0])
    vt = variance_targets(cache.lam, 1.0, ens.grid)
    diff = pair_mean(cache.H ** 2 - sq_matrix(cache.center, ens.X, ens.dt))
    square = pair_mean(cache.H * cache.H.T)
    return {"int_lambda": vt.int_lam, "mean_H_sq": vt.int_lam + diff.value, "trace_diff": diff.value,
            "trace_diff_se": diff.se, "trace_A2": square.value, "trace_A2_se": square.se,
            "replications": replications}


def check_trace(metrics):
    ok1 = abs(metrics["trace_diff"]) <= 3 * metrics["trace_diff_se"]
    ok2 = abs(metrics["trace_A2"]) <= 3 * metrics["trace_A2_se"]
    return CheckResult("trace_identities", ok1 and ok2, metrics,
                       f"Tr(AA*) {metrics['mean_H_sq']:.4f} vs int lambda {metrics['int_lambda']:.4f} "
                       f"(3SE {3 * metrics['trace_diff_se']:.4f}); Tr(A^2) {metrics['trace_A2']:.4f} "
                       f"(3SE {3 * metrics['trace_A2_se']:.4f})")


def variance_ci(values, level=0.95):
    v = np.asarray(values, float)
    r = len(v)
    s2 = float(v.var(ddof=1))
    a = 1 - level
    return s2, float((r - 1) * s2 / chi2.ppf(1 - a / 2, r - 1)), float((r - 1) * s2 / chi2.ppf(a / 2, r - 1))


def clt_variance_experiment(config, ps, replications, phi=None, reference=None, threads=1):
    """Empirical ``Var eta^N(phi)`` for each constant ``p`` (common random numbers across ``p``)."""
    reference = centring_sample(config) if reference is None else reference
    phi = (phi or TestFunction("terminal")).centre(reference)
    rows = []
    for p in ps:
        cfg = with_p(config, p).replace(replications=int(replications))
        eta = np.array(run_replications(cfg, lambda e: float(phi(e.Z).sum() / np.sqrt(e.membership.n)),
                                        coupled=False, threads=threads))
        var, lo, hi = variance_ci(eta)
        rows.append({"N": int(cfg.N), "p": float(p), "mean": float(eta.mean()), "variance": var,
                     "ci_low": lo, "ci_high": hi, "replications": int(replications)})
    return rows


def check_p_invariance(rows, max_rel=0.10):
    a, b = rows[0], rows[-1]
    overlap = a["ci_low"] <= b["ci_high"] and b["ci_low"] <= a["ci_high"]
    rel = abs(a["variance"] - b["variance"]) / b["variance"]
    return CheckResult("clt_p_invariance", overlap and rel <= max_rel, {"rows": rows, "relative_difference": rel},
                       f"Var eta at p={a['p']}: {a['variance']:.4f} [{a['ci_low']:.4f}, {a['ci_high']:.4f}], "
                       f"p={b['p']}: {b['variance']:.4f} [{b['ci_low']:.4f}, {b['ci_high']:.4f}], rel diff {rel:.3f}")


def nystrom_experiment(config, replications=2000, phi=None, reference=None):
    reference = centring_sample(config) if reference is None else reference
    phi = (phi or TestFunction("terminal")).centre(reference)
    ens = simulate_mean_field(config, replications, stream=STREAM_NYSTROM)
    cache = pair_kernels(ens, config.kernel_set().drift[0][0], marginal=reference)
    vals = phi(ens.X)
    return {"nystrom": nystrom_covariance(cache, vals), "plain_variance": float(np.mean(vals ** 2)),
            "replications": replications}


def check_nystrom(metrics, empirical_variance, max_rel=0.15):
    rel = abs(metrics["nystrom"] - empirical_variance) / empirical_variance
    out = dict(metrics, empirical_variance=empirical_variance, relative_error=rel)
    return CheckResult("nystrom_covariance", rel <= max_rel, out,
                       f"Nystrom {metrics['nystrom']:.4f} vs empirical {empirical_variance:.4f} (rel {rel:.3f})")


def _limit_sample(config, n, r):
    """Independent limit-path proxy for replication ``r`` with ``n`` particles."""
    return simulate_mean_field(config.replace(N=n), n, stream=r)


def _edge_p(config):
    mode, p0, lam, mu = config.edge_arrays()
    if mode == "static":
        return float(p0[0, 0])
    return marginal_edge_probability(config.grid, p0[0, 0], lam[0, 0], mu[0, 0])


def girsanov_experiment(config, ns, p, replications, reference=None):
    reference = centring_sample(config) if reference is None else reference
    kset = config.kernel_set()
    center = Centering(kset.drift[0][0], reference)
    lam = center.lam_from(reference)
    rows = []
    for n in ns:
        cfg = with_p(config.replace(N=int(n)), p)
        pp = _edge_p(cfg)
        d1, d2, ld = [], [], []
        for r in range(replications):
            v = _limit_sample(cfg, int(n), r)
            j = girsanov_functionals(v, EdgeTrajectory(cfg, key=(r,)), pp, center, lam, kset)
            d1.append((j.J1 - j.J1_tilde) ** 2)
            d2.append(abs(j.J2 - j.J2_tilde))
            ld.append(j.log_density)
        m1, s1 = _mean_se(d1)
        m2, s2 = _mean_se(d2)
        w = np.exp(np.asarray(ld))
        rows.append({"N": int(n), "p": float(p), "msd_J1": m1, "se_J1": s1, "mad_J2": m2, "se_J2": s2,
                     "mean_exp_J": float(w.mean()), "se_exp_J": float(w.std(ddof=1) / np.sqrt(len(w))),
                     "replications": replications})
    return rows


def check_girsanov(rows):
    rows = sorted(rows, key=lambda r: r["N"])
    a = [r["msd_J1"] for r in rows]
    b = [r["mad_J2"] for r in rows]
    ok = all(y < x for x, y in zip(a, a[1:])) and all(y < x for x, y in zip(b, b[1:]))
    return CheckResult("girsanov_reductions", ok, {"rows": rows},
                       "E|J1 - J1~|^2: " + ", ".join(f"{v:.3e}" for v in a)
                       + "; E|J2 - J2~|: " + ", ".join(f"{v:.3e}" for v in b))


def incomplete_u_experiment(config, n, p, replications, reference=None):
    reference = centring_sample(config) if reference is None else reference
    center = Centering(config.kernel_set().drift[0][0], reference)
    cfg = with_p(config.replace(N=int(n)), p)
    pp = _edge_p(cfg)
    vt = variance_targets(center.lam_from(reference), pp, cfg.grid)
    u = np.array([incomplete_u(_limit_sample(cfg, int(n), r), EdgeTrajectory(cfg, key=(r,)), pp, center)
                  for r in range(replications)])
    s2 = float(u.var(ddof=1))
    m4 = float(np.mean((u - u.mean()) ** 4))
    return {"N": int(n), "p": float(p), "sample_variance": s2, "se": float(np.sqrt(max(m4 - s2 ** 2, 0) / len(u))),
            "formula": (n - 1) / n * vt.sigma2, "sigma2": vt.sigma2, "mean": float(u.mean()),
            "replications": replications}


def check_incomplete_u(metrics):
    ok = abs(metrics["sample_variance"] - metrics["formula"]) <= 3 * metrics["se"]
    return CheckResult("incomplete_u_variance", ok, metrics,
                       f"Var U_N {metrics['sample_variance']:.4f} vs formula {metrics['formula']:.4f} "
                       f"(3SE {3 * metrics['se']:.4f})")


def mwi_experiment(ts=np.linspace(-0.5, 0.5, 21), i1s=np.linspace(-3, 3, 13), hs=(0.0, 0.25, 1.0, 2.0)):
    worst, failures = -np.inf, 0
    for t in ts:
        for i1 in i1s:
            for h in hs:
                g = generating_check(float(i1), float(h), float(t))
                failures += not g.ok
                worst = max(worst, g.gap - g.bound)
    return {"cases": len(ts) * len(i1s) * len(hs), "failures": failures, "max_gap_minus_bound": float(worst)}


def check_mwi(metrics):
    return CheckResult("mwi_generating_identity", metrics["failures"] == 0, metrics,
                       f"{metrics['cases'] - metrics['failures']}/{metrics['cases']} within remainder, "
                       f"max (gap - bound) {metrics['max_gap_minus_bound']:.2e}")
