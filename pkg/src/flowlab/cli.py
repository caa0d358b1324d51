"""Command line runner: ``flowlab run``, ``flowlab explain`` and ``flowlab list``.

Exit codes: 0 when every check passes, 1 when any check fails, 2 when the
scenario or its model is invalid.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import flows, revuz, stopping
from .errors import FlowlabError, ScenarioError, UnknownCheck
from .htransform import association_residual
from .scenario import CHECK_TYPES, load, num, shipped
from .semigroup import CoexcessiveFunction, engine_for

DEFAULT_SEED = 0


def exact(x):
    if np.ndim(x):
        return {"oracle": "exact", "value": [float(v) for v in np.ravel(x)]}
    return {"oracle": "exact", "value": float(x)}


def mc(est):
    return est.as_dict()


def z_tag(z):
    return {"oracle": "mc", "value": float(z)}


class Context:
    def __init__(self, scenario, seed, n_paths, horizon, tol_exact, tol_z, csv_dir):
        self.sc = scenario
        self.seed = seed
        self.n_paths = n_paths
        self.horizon = horizon
        self.tol_exact = tol_exact
        self.tol_z = tol_z
        self.csv_dir = csv_dir

    def x(self, params):
        return self.sc.state(params.get("x", self.sc.labels[0]))

    def hs(self, params):
        names = params.get("h")
        if names is None:
            return list(zip(self.sc.h_names, self.sc.h_list))
        pairs = dict(zip(self.sc.h_names, self.sc.h_list))
        missing = [n for n in names if n not in pairs]
        if missing:
            raise ScenarioError(f"unknown h recipes {missing}")
        return [(n, pairs[n]) for n in names]

    def write_table(self, name, table):
        if self.csv_dir is None:
            return None
        path = Path(self.csv_dir) / f"{name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            table.write_csv(fh)
        return path.name


# -- check runners ----------------------------------------------------------------

def run_markov(ctx, p):
    sc = ctx.sc
    n = sc.bundle.n
    s_grid = [num(s) for s in p.get("sGrid", [0, 0.25, 0.5, 1, 2])]
    u_grid = [num(u) for u in p.get("uGrid", [0, 0.25, 0.5, 1, 2])]
    f = sc.vector(p["f"], "f") if "f" in p else np.arange(1.0, n + 1.0)
    first = np.zeros(n)
    first[0] = 1.0
    last = np.zeros(n)
    last[-1] = 1.0
    worst = 0.0
    cases = 0
    for s in s_grid:
        events = [flows.CylinderFunctional([]), flows.CylinderFunctional([s], [first])]
        if s > 0:
            events.append(flows.CylinderFunctional([s / 2, s], [last, np.ones(n)]))
        else:
            events.append(flows.CylinderFunctional([s], [last]))
        for u in u_grid:
            for ev in events:
                worst = max(worst, flows.markov_check(sc.bundle, s, u, ev, f))
                cases += 1
    return {"passed": worst <= ctx.tol_exact, "max_residual": exact(worst), "cases": cases}


def run_consistency(ctx, p):
    sc = ctx.sc
    x = ctx.x(p)
    cands = [(num(s), num(t)) for s, t in p.get("candidates", [])]
    res = flows.consistency_certificate(sc.bundle, x, cands)
    out = {"x": sc.labels[x]}
    if isinstance(res, flows.ConsistencyWitness):
        out.update(kind="witness", s=exact(res.s), t=exact(res.t),
                   A=[sc.labels[a] for a in res.A], lhs=exact(res.lhs), rhs=exact(res.rhs),
                   gap=exact(res.gap))
    else:
        out.update(kind="no-violation", pairs_checked=res.pairs_checked, sub_markov=res.sub_markov)
    expect = p.get("expect")
    out["passed"] = expect is None or expect == out["kind"]
    return out


def run_h_independence(ctx, p):
    sc = ctx.sc
    queries = []
    for q in p.get("queries", [{"times": ["0.5"]}, {"times": ["1"]}]):
        times = [num(t) for t in q["times"]]
        factors = [sc.vector(f, "factor") for f in q["factors"]] if "factors" in q else \
            [np.ones(sc.bundle.n)] * len(times)
        queries.append(flows.FlowQuery(ctx.x(q), flows.CylinderFunctional(times, factors)))
    hs = ctx.hs(p)
    names = [n for n, _ in hs]
    rep = flows.h_independence_check(sc.bundle, [h for _, h in hs], queries, ctx.n_paths, ctx.seed,
                                     ctx.tol_exact, ctx.tol_z)
    out_q = []
    for qi, q in enumerate(queries):
        out_q.append({
            "x": sc.labels[q.initial],
            "times": exact([float(t) for t in q.functional.times]),
            "exact": exact(flows.flow_exact(sc.bundle, q)),
            "mc": {names[j]: mc(e) for j, e in enumerate(rep.estimates[qi])},
            "z": {f"{names[i]}~{names[j]}": z_tag(z)
                  for (k, i, j), z in rep.z_scores.items() if k == qi},
        })
    return {"passed": rep.passed, "kernel_residual": exact(rep.kernel_residual),
            "association_residual": {n: exact(association_residual(h)) for n, h in hs},
            "queries": out_q}


def run_strong_markov(ctx, p):
    sc = ctx.sc
    x = ctx.x(p)
    sigma = sc.stopping_time(p.get("sigma", {"hitting": [sc.labels[-1]]}))
    tau = sc.stopping_time(p.get("tau", "1"))
    per_h = {}
    ok = True
    for j, (name, ht) in enumerate(ctx.hs(p)):
        r = stopping.strong_markov_check(ht, x, sigma, tau, n_paths=ctx.n_paths, seed=ctx.seed + j,
                                         horizon=ctx.horizon, tol_z=ctx.tol_z)
        ok &= r.passed
        per_h[name] = {
            "lhs": mc(r.lhs.estimate), "rhs": mc(r.rhs.estimate), "z": z_tag(r.z),
            "censored": {"lhs": z_tag(r.lhs.censored_fraction), "rhs": z_tag(r.rhs.censored_fraction)},
            "heavy_tail": r.lhs.heavy_tail, "passed": r.passed,
        }
        if r.exact is not None:
            per_h[name]["exact_anchor"] = exact(r.exact)
    return {"passed": bool(ok), "x": sc.labels[x], "by_h": per_h}


def run_first_passage(ctx, p):
    sc = ctx.sc
    x = ctx.x(p)
    B = sc.states(p.get("B", [sc.labels[-1]]))
    f = sc.vector(p["f"], "f") if "f" in p else np.ones(sc.bundle.n)
    w = stopping.first_passage_exact(sc.bundle, B, f)
    resid = stopping.dirichlet_residual(sc.bundle, B, w)
    ok = resid <= ctx.tol_exact
    per_h = {}
    for j, (name, ht) in enumerate(ctx.hs(p)):
        e = stopping.expanded_flow_mc(ht, x, stopping.Hitting(B), stopping.TerminalValue(f),
                                      ctx.n_paths, ctx.seed, j, ctx.horizon)
        z = e.estimate.z_against(w[x])
        ok &= abs(z) <= ctx.tol_z
        per_h[name] = {"mc": mc(e.estimate), "z": z_tag(z), "censored": z_tag(e.censored_fraction),
                       "h_route": exact(stopping.first_passage_h_route(ht, B, f))}
    return {"passed": bool(ok), "x": sc.labels[x], "w": exact(w), "dirichlet_residual": exact(resid),
            "finite_variance": stopping.finite_second_moment(sc.bundle, B), "by_h": per_h}


def run_revuz(ctx, p):
    sc = ctx.sc
    n = sc.bundle.n
    v = sc.vector(p.get("v", [1] * n), "v")
    f = sc.vector(p.get("f", [1] * n), "f")
    gspec = p.get("g", {"coresolvent": [1] * n, "gamma": sc.bundle.alpha})
    gamma = num(gspec["gamma"])
    if "coresolvent" in gspec:
        g = engine_for(sc.bundle).make_coexcessive(sc.vector(gspec["coresolvent"], "g"), gamma)
    else:
        g = CoexcessiveFunction(sc.vector(gspec["direct"], "g"), gamma, None)
    grid = [num(b) for b in p.get("betaGrid", [1e2, 1e4, 1e6])]
    table = revuz.revuz_limit_check(sc.bundle, v, f, g, grid, rel_tol=num(p.get("relTol", 1e-4)))
    beta = grid[-1]
    direct = revuz.revuz_pairing(sc.bundle, v, f, g.g, gamma, beta)
    classical = {}
    ok = table.passed
    for name, ht in ctx.hs(p):
        c = revuz.classical_revuz_pairing(ht, v, f, g.g, gamma, beta)
        classical[name] = exact(c)
        ok &= abs(c - direct) <= ctx.tol_exact * max(1.0, abs(direct))
    return {"passed": bool(ok), "rows": [[exact(c) for c in r] for r in table.rows],
            "target": exact(table.rows[0][2]), "classical_at_last_beta": classical,
            "csv": ctx.write_table(p["name"], table)}


def run_yosida(ctx, p):
    sc = ctx.sc
    mu = sc.vector(p.get("mu", [1] * sc.bundle.n), "mu")
    beta = num(p.get("beta", sc.bundle.alpha))
    grid = [int(num(k)) for k in p.get("nGrid", [10, 20, 40, 80])]
    rep = revuz.yosida_construction(sc.bundle, mu, beta, grid)
    return {"passed": rep.passed, "rows": [[exact(c) for c in r] for r in rep.table.rows],
            "ratio_last": exact(rep.ratio_last if rep.ratio_last is not None else 0.0),
            "monotone": rep.monotone, "csv": ctx.write_table(p["name"], rep.table)}


def _window(sc, w):
    if "rectangle" in w:
        s, t = (num(a) for a in w["rectangle"])
        return revuz.Rectangle(s, t)
    if "until" in w:
        return revuz.StochasticInterval(sc.stopping_time(w["until"]))
    raise ScenarioError(f"bad window {w!r}")


def run_optional_measure(ctx, p):
    sc = ctx.sc
    x = ctx.x(p)
    pcaf = revuz.PcafSpec(sc.vector(p.get("v", [1] * sc.bundle.n), "v"))
    wins = [_window(sc, w) for w in p.get("windows", [{"rectangle": ["0", "1"]}])]
    hs = ctx.hs(p)
    names = [n for n, _ in hs]
    rep = revuz.optional_h_independence(sc.bundle, pcaf, [h for _, h in hs], wins, x, ctx.n_paths,
                                        ctx.seed, tol_exact=ctx.tol_exact, tol_z=ctx.tol_z)
    ok = rep.passed
    out_w = []
    for wi, raw in enumerate(p.get("windows", [{"rectangle": ["0", "1"]}])):
        ex = rep.exact[wi]
        entry = {"window": raw, "mc": {}, "z_vs_exact": {}}
        if ex[0] is not None:
            entry["exact"] = exact(ex[0])
        for j, est in enumerate(rep.estimates[wi]):
            entry["mc"][names[j]] = {**mc(est.estimate), "censored": est.censored_fraction}
            if ex[0] is not None:
                z = est.estimate.z_against(ex[0])
                ok &= abs(z) <= ctx.tol_z
                entry["z_vs_exact"][names[j]] = z_tag(z)
        entry["z_pairwise"] = {f"{names[i]}~{names[j]}": z_tag(z)
                               for (k, i, j), z in rep.z_scores.items() if k == wi}
        out_w.append(entry)
    return {"passed": bool(ok), "x": sc.labels[x], "windows": out_w,
            "exact_spread": exact(rep.exact_spread), "potential_spread": exact(rep.potential_spread)}


RUNNERS = {
    "consistency": run_consistency,
    "first-passage": run_first_passage,
    "h-independence": run_h_independence,
    "markov": run_markov,
    "optional-measure": run_optional_measure,
    "revuz": run_revuz,
    "strong-markov": run_strong_markov,
    "yosida": run_yosida,
}

EXPLAIN = {
    "consistency": (
        "Flows up to different times are generally not restrictions of one path measure. "
        "When mass is created (positive generator row sums) the flow up to t, restricted to "
        "events observed by s, can exceed the flow up to s. The check searches for such a "
        "witness pair (s, t) and reports both masses; sub-Markov models yield no violation."),
    "first-passage": (
        "The expanded flow of f at the first entrance to B solves the Dirichlet problem "
        "(L w) = 0 off B, w = f on B. The check solves it exactly and compares the "
        "importance-weighted h-process estimate for every h."),
    "h-independence": (
        "Flows built from any properly associated excessive h coincide: the kernels "
        "h e^{alpha t} exp(t L^h) h^{-1} all equal exp(t L). The check compares the kernels "
        "exactly and the path estimators pairwise by z-score."),
    "markov": (
        "Markov identity of the flows: for an event observed by time s, the flow up to s+u "
        "of that event times f(X_{s+u}) equals the flow up to s of the event times "
        "(T_u f)(X_s). The check evaluates both sides exactly on a grid."),
    "optional-measure": (
        "Optional measures integrate the flow weights against an additive functional over "
        "time-path windows. Rectangles [s,t) have exact values by quadrature and windows "
        "[[0, sigma[[ by a linear solve; MC estimates from every h must agree with them "
        "and with each other, and U^beta_A f must not depend on h."),
    "revuz": (
        "Revuz correspondence: beta (g, U^{beta+gamma}_A f)_m tends to the integral of f g "
        "against the measure v m as beta grows, with error of order 1/beta. The check "
        "tabulates the approach on a beta grid and repeats the last pairing on the h-process."),
    "strong-markov": (
        "Strong Markov property of the flows: the flow up to sigma + tau o theta_sigma equals "
        "the flow up to sigma of the inner flow Q_{X_sigma, tau}. Both sides are simulated "
        "on independent streams and compared by z-score; an exact anchor is reported."),
    "yosida": (
        "Yosida-type approximation: g_n = n(u - n G_{n+beta} u) converges to the density v "
        "of mu at rate 1/n, and n G_{n+beta} u increases to u = U_beta mu."),
}


def explain(check):
    if check not in EXPLAIN:
        raise UnknownCheck(check)
    return EXPLAIN[check]


# -- run ---------------------------------------------------------------------------

def resolve_seed(flag, file_seed):
    if flag is not None:
        return int(flag)
    if file_seed is not None:
        return int(file_seed)
    env = os.environ.get("FLOWLAB_SEED")
    if env:
        return int(env)
    return DEFAULT_SEED


def _run_one(ctx, check):
    t0 = time.perf_counter()
    try:
        res = RUNNERS[check["type"]](ctx, check)
    except ScenarioError:
        raise
    except FlowlabError as e:
        res = {"passed": False, "error": f"{type(e).__name__}: {e}"}
    res = {"type": check["type"], **res}
    return check["name"], res, time.perf_counter() - t0


def build_report(sc, seed=None, n_paths=None, horizon=None, tol_exact=None, tol_z=None,
                 csv_dir=None, jobs=1):
    """Run every check of a parsed scenario; returns the report dict."""
    ctx = Context(
        sc,
        resolve_seed(seed, sc.seed),
        int(n_paths) if n_paths is not None else sc.n_paths,
        horizon if horizon is not None else sc.horizon,
        tol_exact if tol_exact is not None else sc.tol_exact,
        tol_z if tol_z is not None else sc.tol_z,
        csv_dir,
    )
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(lambda c: _run_one(ctx, c), sc.checks))
    else:
        results = [_run_one(ctx, c) for c in sc.checks]
    checks = {name: res for name, res, _ in sorted(results, key=lambda r: r[0])}
    return {
        "scenario": sc.name,
        "seed": ctx.seed,
        "n_paths": ctx.n_paths,
        "horizon": ctx.horizon,
        "tolerances": {"exact": ctx.tol_exact, "z": ctx.tol_z},
        "states": list(sc.labels),
        "h": {name: exact(h.h) for name, h in zip(sc.h_names, sc.h_list)},
        "passed": all(r["passed"] for r in checks.values()),
        "checks": checks,
        "timing": {
            "started": started,
            "wall_seconds": time.perf_counter() - t0,
            "checks": {name: dt for name, _, dt in sorted(results, key=lambda r: r[0])},
        },
    }


def dumps(report):
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def cmd_run(args):
    try:
        sc = load(args.scenario)
        report = build_report(sc, args.seed, args.paths, args.horizon, args.tol_exact, args.tol_z,
                              args.csv_dir, args.jobs)
    except (FlowlabError, ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    text = dumps(report)
    summary = sys.stdout
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
        summary = sys.stderr
    for name, res in report["checks"].items():
        print(f"{'PASS' if res['passed'] else 'FAIL'} {name}", file=summary)
    return 0 if report["passed"] else 1


def cmd_explain(args):
    try:
        print(explain(args.check))
    except UnknownCheck:
        print(f"error: unknown check {args.check!r}; known: {', '.join(CHECK_TYPES)}", file=sys.stderr)
        return 2
    return 0


def cmd_list(args):
    for name in shipped():
        print(name)
    return 0


def make_parser():
    ap = argparse.ArgumentParser(prog="flowlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run every check of a scenario")
    r.add_argument("scenario", help="scenario JSON path or shipped scenario name")
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--horizon", type=float)
    r.add_argument("--tol-exact", type=float)
    r.add_argument("--tol-z", type=float)
    r.add_argument("--report", help="write the JSON report here instead of stdout")
    r.add_argument("--csv-dir", help="directory for convergence tables")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(fn=cmd_run)
    e = sub.add_parser("explain", help="describe what a check certifies")
    e.add_argument("check")
    e.set_defaults(fn=cmd_explain)
    s = sub.add_parser("list", help="list shipped scenarios")
    s.set_defaults(fn=cmd_list)
    return ap


def main(argv=None):
    args = make_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
