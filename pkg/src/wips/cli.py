"""Command line: ``wips run | describe | check``.

Exit status 0 when every check passes, 1 when a check fails (or an
experiment raised), 2 for an invalid plan or arguments.
"""

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import sys
import traceback
from contextlib import nullcontext
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import __version__
from . import experiments as ex
from .config import INITIAL_LAWS, ConfigError, ScenarioConfig, registry_entries
from .estimators.clt import TEST_FUNCTIONS

log = logging.getLogger("wips")

THREADS_ENV = "WIPS_THREADS"
EDGE_MODELS = {
    "static": "independent Bernoulli(prob0) edges frozen over [0, T]",
    "markov": "independent on/off chains per edge, rates rate_on / rate_off, started Bernoulli(prob0)",
}


class PlanError(ConfigError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------------------
# plans


@dataclass
class Scenario:
    name: str
    base: ScenarioConfig
    sweep: dict
    estimators: Optional[tuple] = None    # restricts the plan's estimators; None means all

    def points(self):
        """``(N, p, edge_mode)`` for every sweep combination, in plan order."""
        ns = self.sweep.get("N", [self.base.N])
        modes = self.sweep.get("edge_mode", [self.base.edges.get("mode", "static")])
        rule = self.sweep.get("p_rule")
        out = []
        for n, mode in itertools.product(ns, modes):
            if rule is not None:
                ps = [float(rule.get("scale", 1.0)) * n ** float(rule["exponent"])]
            else:
                ps = self.sweep.get("p", [self.base.edges.get("prob0", 1.0)])
            out.extend((int(n), float(p), mode) for p in ps)
        return out

    def config(self, n, p, mode):
        edges = {**self.base.edges, "mode": mode, "prob0": p}
        if mode == "static":
            edges = {"mode": "static", "prob0": p}
        return self.base.replace(N=n, edges=edges)


@dataclass
class ExperimentPlan:
    name: str
    seed: int
    scenarios: list
    estimators: list
    output: Optional[str] = None
    strict: bool = False
    reference_size: int = 10 ** 4
    source: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data, seed=None):
        known = {"name", "seed", "scenarios", "estimators", "output", "strict", "reference_size"}
        unknown = set(data) - known
        if unknown:
            raise PlanError(f"unknown plan keys {sorted(unknown)}")
        ests = data.get("estimators") or []
        if not ests:
            raise PlanError("plan selects no estimators")
        ests = [e if isinstance(e, dict) else {"name": e} for e in ests]
        for e in ests:
            if e.get("name") not in ESTIMATORS:
                raise PlanError(f"unknown estimator {e.get('name')!r}; known: {sorted(ESTIMATORS)}")
        seed = int(data.get("seed", 0) if seed is None else seed)
        scen = []
        for i, s in enumerate(data.get("scenarios") or []):
            unknown = set(s) - {"name", "scenario", "sweep", "estimators"}
            if unknown:
                raise PlanError(f"unknown scenario entry keys {sorted(unknown)}")
            base = ScenarioConfig.from_dict({**s.get("scenario", {"N": 128}), "seed": seed})
            sweep = dict(s.get("sweep", {}))
            bad = set(sweep) - {"N", "p", "p_rule", "edge_mode"}
            if bad:
                raise PlanError(f"unknown sweep axes {sorted(bad)}")
            for axis, values in sweep.items():
                if axis != "p_rule" and not values:
                    raise PlanError(f"sweep axis {axis!r} is empty")
            if "p" in sweep and "p_rule" in sweep:
                raise PlanError("give either p or p_rule, not both")
            if "p_rule" in sweep and "exponent" not in sweep["p_rule"]:
                raise PlanError("p_rule needs an exponent")
            only = s.get("estimators")
            if only is not None:
                missing = set(only) - {e["name"] for e in ests}
                if not only or missing:
                    raise PlanError(f"scenario estimators must be a non-empty subset of the plan's, got {only}")
                only = tuple(only)
            sc = Scenario(s.get("name", f"scenario{i}"), base, sweep, only)
            for pt in sc.points():
                sc.config(*pt)       # validates every sweep point up front
            scen.append(sc)
        needs_scenario = any(ESTIMATORS[e["name"]].needs_scenario for e in ests)
        if needs_scenario and not scen:
            raise PlanError("plan has estimators that need a scenario but lists none")
        return cls(data.get("name", "plan"), seed, scen, ests, data.get("output"),
                   bool(data.get("strict", False)), int(data.get("reference_size", 10 ** 4)), dict(data))


def load_plan(ref, seed=None):
    """A plan from a path, or a shipped plan by name (``golden``, ``lln_sweep``)."""
    path = Path(ref)
    try:
        if path.exists():
            text = path.read_text()
        else:
            text = resources.files("wips.plans").joinpath(f"{ref}.json").read_text()
    except (FileNotFoundError, OSError) as err:
        raise PlanError(f"cannot read plan {ref!r}: {err}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise PlanError(f"plan {ref!r} is not valid JSON: {err}") from None
    return ExperimentPlan.from_dict(data, seed)


# ---------------------------------------------------------------------------
# estimator registry


@dataclass
class Outcome:
    tables: dict = field(default_factory=dict)     # name -> list of row dicts
    checks: list = field(default_factory=list)     # (kind, input, params)


@dataclass(frozen=True)
class Estimator:
    func: object
    doc: str
    needs_scenario: bool = True


ESTIMATORS = {}


def estimator(name, doc, needs_scenario=True):
    def deco(f):
        ESTIMATORS[name] = Estimator(f, doc, needs_scenario)
        return f
    return deco


class Context:
    def __init__(self, plan, threads):
        self.plan = plan
        self.threads = threads
        self._cache = {}

    def cached(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def reference(self, scenario):
        return self.cached(("ref", scenario.name),
                           lambda: ex.centring_sample(scenario.base, self.plan.reference_size))

    def coupling_rows(self, scenario, replications):
        def make():
            rows = []
            for n, p, mode in scenario.points():
                cfg = scenario.config(n, p, mode)
                rows.extend(dict(r, edge_mode=mode) for r in
                            ex.coupling_sweep(cfg, [n], lambda _: p, replications, self.threads))
            return rows
        return self.cached(("coupling", scenario.name, replications), make)


def _reps(scenario, params):
    return int(params.get("replications", scenario.base.replications))


@estimator("coupling_error", "mean sup-norm coupling errors for every sweep point")
def _est_coupling(ctx, sc, params):
    return Outcome({"coupling_error": ctx.coupling_rows(sc, _reps(sc, params))})


@estimator("lln_rate", "rate table sqrt(Np) * error with log-log slope, per edge mode")
def _est_rate(ctx, sc, params):
    rows = ctx.coupling_rows(sc, _reps(sc, params))
    out = Outcome({"coupling_error": rows})
    column = params.get("column", "mean_sup_sq")
    for mode in sorted({r["edge_mode"] for r in rows}):
        sub = [r for r in rows if r["edge_mode"] == mode]
        if len(sub) < 3:
            out.tables[f"lln_rate_{mode}_fit"] = [{"note": f"rate fit needs 3 sweep points, have {len(sub)}"}]
            continue
        metrics = ex.rate_metrics(sub, column)
        out.tables[f"lln_rate_{mode}"] = metrics["rows"]
        out.tables[f"lln_rate_{mode}_fit"] = [{"slope": metrics["slope"], "variation": metrics["variation"],
                                              "column": column}]
        if params.get("check", True):
            out.checks.append(("lln_rate", metrics, {k: params[k] for k in ("slope_max", "max_variation")
                                                     if k in params}))
    return out


@estimator("lln_decreasing", "check that mean coupling errors decrease strictly in N")
def _est_decreasing(ctx, sc, params):
    rows = ctx.coupling_rows(sc, _reps(sc, params))
    out = Outcome({"coupling_error": rows})
    for mode in sorted({r["edge_mode"] for r in rows}):
        out.checks.append(("decreasing", [r for r in rows if r["edge_mode"] == mode],
                           {"column": params.get("column", "mean_sup_sq")}))
    return out


@estimator("poc", "cross-covariance of terminal values of distinct particles")
def _est_poc(ctx, sc, params):
    rows = []
    for n, p, mode in sc.points():
        rows.extend(ex.poc_experiment(sc.config(n, p, mode), [n], p, _reps(sc, params),
                                      int(params.get("subset", 64)), ctx.threads))
    out = Outcome({"poc": rows})
    if params.get("check", True) and len({r["N"] for r in rows}) > 1:
        out.checks.append(("poc", rows, {}))
    return out


@estimator("clt_variance", "empirical variance of the fluctuation field per p")
def _est_clt(ctx, sc, params):
    def make():
        pts = sc.points()
        n, mode = pts[0][0], pts[0][2]
        ps = [p for m, p, md in pts if m == n and md == mode]
        return ex.clt_variance_experiment(sc.config(n, ps[0], mode), ps, _reps(sc, params),
                                          reference=ctx.reference(sc), threads=ctx.threads)
    rows = ctx.cached(("clt", sc.name, _reps(sc, params)), make)
    out = Outcome({"clt_variance": rows})
    if params.get("check", True) and len(rows) > 1:
        out.checks.append(("p_invariance", rows, {k: params[k] for k in ("max_rel",) if k in params}))
    return out


@estimator("nystrom", "Nystrom evaluation of the limiting variance; checked against clt_variance at p = 1")
def _est_nystrom(ctx, sc, params):
    metrics = ex.nystrom_experiment(sc.base, int(params.get("paths", 2000)), reference=ctx.reference(sc))
    out = Outcome({"nystrom": [metrics]})
    rows = [r for key, v in ctx._cache.items() if key[:2] == ("clt", sc.name) for r in v]
    full = [r for r in rows if r["p"] == 1.0]
    if params.get("check", True) and full:
        out.checks.append(("nystrom", metrics, {"empirical_variance": full[0]["variance"],
                                                **{k: params[k] for k in ("max_rel",) if k in params}}))
    return out


@estimator("trace", "trace identities of the pair-kernel operator")
def _est_trace(ctx, sc, params):
    metrics = ex.trace_experiment(sc.base, int(params.get("paths", 2000)))
    out = Outcome({"trace": [metrics]})
    if params.get("check", True):
        out.checks.append(("trace", metrics, {}))
    return out


@estimator("girsanov", "change-of-measure exponents and their reductions per sweep point")
def _est_girsanov(ctx, sc, params):
    rows = []
    for n, p, mode in sc.points():
        rows.extend(ex.girsanov_experiment(sc.config(n, p, mode), [n], p, _reps(sc, params),
                                           reference=ctx.reference(sc)))
    out = Outcome({"girsanov": rows})
    if params.get("check", True) and len(rows) > 1:
        out.checks.append(("girsanov", rows, {}))
    return out


@estimator("incomplete_u", "variance of the edge-fluctuation U-statistic against its formula")
def _est_u(ctx, sc, params):
    rows = [ex.incomplete_u_experiment(sc.config(n, p, mode), n, p, _reps(sc, params), reference=ctx.reference(sc))
            for n, p, mode in sc.points()]
    out = Outcome({"incomplete_u": rows})
    if params.get("check", True):
        out.checks.extend(("incomplete_u", r, {}) for r in rows)
    return out


@estimator("lemma_oracles", "binomial inverse moments, neighbour sums and degree tails", needs_scenario=False)
def _est_lemmas(ctx, sc, params):
    exact = ex.oracle_exactness_experiment()
    rows = ex.lemma_diagnostics(ctx.plan.seed, int(params.get("neighbor_replications", 20000)),
                                int(params.get("tail_replications", 10 ** 6)))
    out = Outcome({"oracle_exactness": [{k: exact[k] for k in ("max_abs_diff", "bound_violations")}],
                   "lemma_bounds": rows})
    out.checks += [("oracle_exactness", exact, {}), ("lemma_bounds", rows, {})]
    return out


@estimator("markov_marginal", "single-edge on/off frequencies against the closed form", needs_scenario=False)
def _est_markov(ctx, sc, params):
    metrics = ex.markov_marginal_experiment(float(params.get("prob0", 0.9)), float(params.get("rate_on", 1.0)),
                                            float(params.get("rate_off", 3.0)), float(params.get("t", 1.0)),
                                            int(params.get("edges", 10 ** 5)), seed=ctx.plan.seed)
    return Outcome({"markov_marginal": [metrics]}, [("markov_marginal", metrics, {})])


@estimator("mwi", "generating identity of multiple Wiener integrals", needs_scenario=False)
def _est_mwi(ctx, sc, params):
    metrics = ex.mwi_experiment()
    return Outcome({"mwi": [metrics]}, [("mwi", metrics, {})])


# kind -> evaluator(input, **params) -> CheckResult; used at run time and by ``check``
EVALUATORS = {
    "lln_rate": ex.check_lln_rate,
    "decreasing": lambda rows, column="mean_sup_sq": ex.check_strictly_decreasing(rows, column),
    "poc": ex.check_poc,
    "p_invariance": ex.check_p_invariance,
    "nystrom": ex.check_nystrom,
    "trace": ex.check_trace,
    "girsanov": ex.check_girsanov,
    "incomplete_u": ex.check_incomplete_u,
    "oracle_exactness": ex.check_oracle_exactness,
    "lemma_bounds": ex.check_lemma_diagnostics,
    "markov_marginal": ex.check_markov_marginal,
    "mwi": ex.check_mwi,
}


# ---------------------------------------------------------------------------
# output


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def table_text(rows):
    if not rows:
        return ""
    cols = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in cols])
    return buf.getvalue()


def _blas_limit(strict):
    if not strict:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(1)


def run_experiment(plan, out_dir, threads=1, strict=None):
    """Run every estimator of ``plan`` and write results under ``out_dir``; returns the summary."""
    strict = plan.strict if strict is None else strict
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(plan, threads)
    checks, failures = [], []
    groups = [(sc, e) for sc in plan.scenarios for e in plan.estimators
              if ESTIMATORS[e["name"]].needs_scenario and (sc.estimators is None or e["name"] in sc.estimators)]
    groups += [(None, e) for e in plan.estimators if not ESTIMATORS[e["name"]].needs_scenario]
    with _blas_limit(strict):
        for sc, est in groups:
            where = sc.name if sc else "global"
            params = {k: v for k, v in est.items() if k != "name"}
            log.info("%s: %s", where, est["name"])
            try:
                outcome = ESTIMATORS[est["name"]].func(ctx, sc, params)
            except Exception as err:        # recorded; other scenarios still run
                log.error("%s/%s failed: %s", where, est["name"], err)
                failures.append({"scenario": where, "estimator": est["name"], "error": repr(err),
                                 "trace": traceback.format_exc(limit=3) if not strict else ""})
                continue
            folder = out / where
            folder.mkdir(exist_ok=True)
            for tname, rows in outcome.tables.items():
                (folder / f"{tname}.tsv").write_text(table_text(rows))
            for kind, inp, cparams in outcome.checks:
                res = EVALUATORS[kind](inp, **cparams)
                checks.append({"scenario": where, "estimator": est["name"], "kind": kind, "name": res.name, "input": inp,
                               "params": cparams, "passed": bool(res.passed), "detail": res.detail})
    summary = {
        "plan": plan.name,
        "seed": plan.seed,
        "passed": bool(all(c["passed"] for c in checks) and not failures),
        "checks": checks,
        "failures": failures,
    }
    (out / "summary.json").write_text(canonical_json(summary))
    manifest = {
        "plan": plan.name,
        "plan_hash": digest(plan.source),
        "seed": plan.seed,
        "strict": bool(strict),
        "version": __version__,
        "scenarios": {sc.name: {"config_hash": sc.base.digest(), "config": sc.base.to_dict(), "sweep": sc.sweep,
                               "estimators": list(sc.estimators) if sc.estimators else None}
                      for sc in plan.scenarios},
        "estimators": plan.estimators,
    }
    (out / "manifest.json").write_text(canonical_json(manifest))
    return summary


def recheck(out_dir):
    """Re-evaluate the stored checks of a finished run."""
    summary = json.loads((Path(out_dir) / "summary.json").read_text())
    results = []
    for c in summary["checks"]:
        res = EVALUATORS[c["kind"]](c["input"], **c["params"])
        results.append((c["scenario"], res))
    return results, summary.get("failures", [])


def describe_registry():
    """Kernels, initial laws, test functions and edge models as a JSON-able dict."""
    return {
        "kernels": registry_entries(),
        "initial_laws": dict(INITIAL_LAWS),
        "test_functions": sorted(TEST_FUNCTIONS),
        "edge_models": dict(EDGE_MODELS),
        "estimators": {k: v.doc for k, v in sorted(ESTIMATORS.items())},
    }


def _describe_text(reg):
    lines = ["kernels:"]
    for name, e in reg["kernels"].items():
        lines.append(f"  {name:26s} {e['role']:9s} params={e['n_params']}  {e['doc']}")
    lines.append("initial laws:")
    lines += [f"  {k:26s} {v}" for k, v in reg["initial_laws"].items()]
    lines.append("test functions:")
    lines += [f"  {k}" for k in reg["test_functions"]]
    lines.append("edge models:")
    lines += [f"  {k:26s} {v}" for k, v in reg["edge_models"].items()]
    lines.append("estimators:")
    lines += [f"  {k:26s} {v}" for k, v in reg["estimators"].items()]
    return "\n".join(lines)


# ---------------------------------------------------------------------------


def _parser():
    ap = argparse.ArgumentParser(prog="wips", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", help="run an experiment plan")
    run.add_argument("--plan", required=True, help="plan file, or the name of a shipped plan")
    run.add_argument("--seed", type=int, help="override the plan's master seed")
    run.add_argument("--threads", type=int, default=None,
                     help=f"replication worker threads (default ${THREADS_ENV} or 1)")
    run.add_argument("--strict", action="store_true", help="pin BLAS to one thread for bit-exact output")
    run.add_argument("--out", help="output directory (default: the plan's, else ./results/<plan>)")
    desc = sub.add_parser("describe", help="list registry entries")
    desc.add_argument("--json", action="store_true", help="machine-readable output")
    chk = sub.add_parser("check", help="re-evaluate checks of an existing run")
    chk.add_argument("--out", required=True, help="directory written by run")
    return ap


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as err:
        return 2 if err.code else 0
    if args.verb == "describe":
        reg = describe_registry()
        print(canonical_json(reg) if args.json else _describe_text(reg), end="" if args.json else "\n")
        return 0
    if args.verb == "check":
        try:
            results, failures = recheck(args.out)
        except (OSError, KeyError, json.JSONDecodeError) as err:
            print(f"error: cannot read results in {args.out}: {err}", file=sys.stderr)
            return 2
        for where, res in results:
            print(f"{where}: {res.line()}")
        for f in failures:
            print(f"{f['scenario']}: FAIL  {f['estimator']} raised {f['error']}")
        return 0 if all(r.passed for _, r in results) and not failures else 1
    try:
        plan = load_plan(args.plan, args.seed)
        threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
        if threads < 1:
            raise PlanError("threads must be >= 1")
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    out = args.out or plan.output or os.path.join("results", plan.name)
    summary = run_experiment(plan, out, threads, strict=args.strict or plan.strict)
    for c in summary["checks"]:
        print(f"{c['scenario']}: {'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['detail']}")
    for f in summary["failures"]:
        print(f"{f['scenario']}: FAIL  {f['estimator']} raised {f['error']}")
    return 0 if summary["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
