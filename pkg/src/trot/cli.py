"""
Command-line interface.

    trot solve  PROBLEM.json --q 0.5 --lambda 10 --out DIR [--emit-heatmap]
    trot synth  --regions 20 --records 50000 --coupling 0.8 --seed 1 --out DIR
    trot cv     RECORDS.csv --cost survey --survey DIR/truth.json --out DIR
    trot infer  RECORDS.csv --cost rbf --q 2 --lambda 10 --out DIR
    trot sweep  {triangle,gluing,indiscernibles} --out DIR

Exit codes: 0 success, 1 non-convergence under ``--strict``, 2 bad input.
Flags override values from ``--config FILE.json``, which override defaults.
"""

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import divergence_lab, eco
from .core import QParams, TransportProblem, trot_objective
from .solvers import SolverConfig, solve

EXIT_OK, EXIT_NONCONVERGED, EXIT_BAD_INPUT = 0, 1, 2

DEFAULTS = {
    "q": 1.0, "lambda": 1.0, "cost": "rbf", "gamma": 10.0, "tol": 1e-9,
    "max_iters": 20000, "production_mods": "on", "jobs": os.cpu_count() or 1,
    "seed": 0, "out": ".", "strict": False, "kl_direction": "truth-first",
    "emit_heatmap": False, "survey": None, "holdin": 5, "q_grid": None,
    "lambda_grid": None, "regions": 20, "records": 50000, "coupling": 0.8,
    "trials": 500, "n": 5, "beta": [1.0, 2.0],
}


class InputError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--jobs", type=int, help="worker threads for region solves")
    p.add_argument("--strict", action="store_true", default=None,
                   help="exit 1 if any solve fails to converge")


def _add_solver(p, grid=False):
    if grid:
        p.add_argument("--q-grid", type=float, nargs="+", help="q values")
        p.add_argument("--lambda-grid", type=float, nargs="+", help="lambda values")
    else:
        p.add_argument("--q", type=float, help="deformation q >= 0")
        p.add_argument("--lambda", dest="lambda", type=float,
                       help="inverse regularization weight > 0")
    p.add_argument("--tol", type=float, help="marginal L1 tolerance")
    p.add_argument("--max-iters", type=int, help="outer iteration limit")
    p.add_argument("--production-mods", choices=["on", "off"],
                   help="SO-TROT speed-ups")


def _add_cost(p):
    p.add_argument("--cost", choices=["rbf", "survey", "no_prior"], help="cost matrix kind")
    p.add_argument("--gamma", type=float, help="RBF bandwidth")
    p.add_argument("--survey", metavar="FILE",
                   help="JSON with survey_proportions (a truth sidecar works)")
    p.add_argument("--kl-direction", choices=["truth-first", "inferred-first"],
                   help="argument order of the evaluation KL")


def build_parser():
    ap = argparse.ArgumentParser(prog="trot", description="Tsallis-regularized "
                                 "optimal transport and ecological inference.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one transport problem")
    p.add_argument("problem", help="JSON {r, c, M}")
    _add_common(p)
    _add_solver(p)
    p.add_argument("--emit-heatmap", action="store_true", default=None,
                   help="also write the plan as a CSV grid")

    p = sub.add_parser("synth", help="write a synthetic voter dataset")
    _add_common(p)
    p.add_argument("--regions", type=int, help="number of regions")
    p.add_argument("--records", type=int, help="records per region")
    p.add_argument("--coupling", type=float, help="coupling strength in [0, 1]")

    for name, helptext in (("cv", "cross-validate (q, lambda)"),
                           ("infer", "infer joints and compare with baselines")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("records", help="voter records CSV")
        _add_common(p)
        _add_cost(p)
        _add_solver(p, grid=(name == "cv"))
        if name == "infer":
            p.add_argument("--q-grid", type=float, nargs="+",
                           help="cross-validate over these q first")
            p.add_argument("--lambda-grid", type=float, nargs="+",
                           help="cross-validate over these lambdas first")
        p.add_argument("--holdin", type=int, help="number of hold-in regions")

    p = sub.add_parser("sweep", help="metric-property sweeps")
    p.add_argument("kind", choices=["triangle", "gluing", "indiscernibles"])
    _add_common(p)
    _add_solver(p)
    p.add_argument("--trials", type=int, help="random trials")
    p.add_argument("--n", type=int, help="support size")
    p.add_argument("--beta", type=float, nargs="+", help="entropy weights")
    return ap


def resolve_options(args):
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(conf, dict):
            raise InputError("config file must hold a JSON object")
        unknown = set(conf) - set(DEFAULTS)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        opts.update(conf)
    for key, val in vars(args).items():
        if val is not None and key not in ("command", "config"):
            opts[key] = val
    return opts


def _solver_config(o):
    try:
        return SolverConfig(max_outer_iters=int(o["max_iters"]), marginal_tol=float(o["tol"]),
                            production_mods=o["production_mods"] == "on")
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _params(o):
    try:
        return QParams(float(o["q"]), float(o["lambda"]))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dump(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def cmd_solve(o):
    try:
        with open(o["problem"], encoding="utf-8") as fh:
            prob = TransportProblem.from_json(fh.read())
    except (OSError, ValueError, TypeError) as exc:
        raise InputError(f"bad problem file: {exc}") from None
    params = _params(o)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        plan, trace, cert = solve(prob, params, _solver_config(o))
    out = o["out"]
    _write(os.path.join(out, "plan.json"), _dump({
        "q": params.q, "lambda": params.lam, "P": plan.P.tolist(),
        "row_residual": plan.row_residual, "col_residual": plan.col_residual,
        "objective": trot_objective(plan, prob, params),
        "converged": trace.converged, "iterations": trace.iterations,
        "solver": trace.solver}))
    _write(os.path.join(out, "duals.json"), _dump({
        "alpha": cert.alpha.tolist(), "beta": cert.beta.tolist(),
        "kkt_residual": cert.residual, "unique": cert.unique}))
    _write(os.path.join(out, "trace.jsonl"), trace.to_jsonl())
    if o["emit_heatmap"]:
        rows = [",".join(f"{x:.12g}" for x in row) for row in plan.P]
        _write(os.path.join(out, "heatmap.csv"), "\n".join(rows) + "\n")
    print(f"{trace.solver}: converged={trace.converged} iterations={trace.iterations} "
          f"kkt={cert.residual:.2e}")
    return EXIT_OK if trace.converged or not o["strict"] else EXIT_NONCONVERGED


def cmd_synth(o):
    try:
        rec, truth = eco.synthesize_dataset(int(o["regions"]), int(o["records"]),
                                            float(o["coupling"]), int(o["seed"]), o["out"])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    print(f"wrote {rec} and {truth}")
    return EXIT_OK


def _load(o):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            data = eco.ingest(o["records"])
    except (OSError, ValueError) as exc:
        raise InputError(f"bad records file: {exc}") from None
    kind = o["cost"]
    survey = None
    if kind == "survey":
        if not o["survey"]:
            raise InputError("--cost survey needs --survey FILE")
        try:
            with open(o["survey"], encoding="utf-8") as fh:
                raw = json.load(fh)
            raw = raw.get("manifest", raw)
            survey = np.array(raw["survey_proportions"], dtype=float)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"bad survey file: {exc}") from None
    try:
        spec = eco.CostMatrixSpec(kind, float(o["gamma"]), survey)
        eco.build_cost_matrix(spec, data)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return data, spec


def _holdin(data, o):
    # A fixed, seeded choice of hold-in regions among those with truth.
    ids = [r.region_id for r in data.regions if r.truth is not None]
    k = min(int(o["holdin"]), len(ids))
    rng = np.random.default_rng(int(o["seed"]))
    return sorted(rng.choice(ids, size=k, replace=False).tolist())


def _grid(o):
    qs, lams = eco.default_grid()
    return (o["q_grid"] or qs), (o["lambda_grid"] or lams)


def cmd_cv(o):
    data, spec = _load(o)
    ids = _holdin(data, o)
    cv = eco.cross_validate(data, ids, _grid(o), spec, _solver_config(o),
                            int(o["jobs"]), o["kl_direction"])
    out = o["out"]
    _write(os.path.join(out, "cv.json"), _dump({"holdin": ids, **cv.to_dict()}))
    lines = ["q,lambda,mean_kl,failed"] + [
        f"{s['q']:.12g},{s['lambda']:.12g},{s['mean_kl']:.12g},{s['failed']}"
        for s in cv.scores]
    _write(os.path.join(out, "cv_grid.csv"), "\n".join(lines) + "\n")
    print(f"best q={cv.best_params[0]:g} lambda={cv.best_params[1]:g}")
    return EXIT_OK


def cmd_infer(o):
    data, spec = _load(o)
    cfg = _solver_config(o)
    cv = None
    if o["q_grid"] or o["lambda_grid"]:
        cv = eco.cross_validate(data, _holdin(data, o), _grid(o), spec, cfg,
                                int(o["jobs"]), o["kl_direction"])
        params = QParams(*cv.best_params)
    else:
        params = _params(o)
    rows = eco.comparison_table(data, params, spec, cfg, int(o["jobs"]), o["kl_direction"])
    out = o["out"]
    _write(os.path.join(out, "report.json"),
           eco.report_json(rows, (params.q, params.lam), cv))
    lines = ["method,mean_kl,sd_kl,mean_abs,sd_abs,capped_cells,failed_regions"] + [
        f"{r.method},{r.mean_kl:.10g},{r.sd_kl:.10g},{r.mean_abs:.10g},"
        f"{r.sd_abs:.10g},{r.capped_cells},{len(r.failed_regions)}" for r in rows]
    _write(os.path.join(out, "comparison.csv"), "\n".join(lines) + "\n")
    for r in rows:
        print(f"{r.method:28s} KL {r.mean_kl:.4f} (sd {r.sd_kl:.4f})  "
              f"abs {r.mean_abs:.5f}")
    failed = any(r.failed_regions for r in rows)
    return EXIT_NONCONVERGED if failed and o["strict"] else EXIT_OK


def cmd_sweep(o):
    rng = np.random.default_rng(int(o["seed"]))
    n, trials = int(o["n"]), int(o["trials"])
    out = o["out"]
    if o["kind"] == "triangle":
        M = divergence_lab.random_metric_matrix(n, rng)
        reps = divergence_lab.triangle_sweep(M, list(o["beta"]), float(o["lambda"]),
                                             trials, float(o["q"]), int(o["seed"]),
                                             _solver_config(o))
        result = {"q": float(o["q"]), "lambda": float(o["lambda"]),
                  "reports": {str(b): json.loads(r.to_json())
                              for b, r in zip(o["beta"], reps)}}
    elif o["kind"] == "gluing":
        q = float(o["q"])
        if q < 1:
            raise InputError("gluing sweep needs q >= 1")
        res = divergence_lab.gluing_sweep(q, trials, n, int(o["seed"]))
        result = {"q": q, "feasibility": json.loads(res["feasibility"].to_json()),
                  "monotonicity": json.loads(res["monotonicity"].to_json()),
                  "worst_case": res["worst_case"]}
    else:
        q = float(o["q"])
        if q < 1:
            raise InputError("indiscernibles check needs q >= 1")
        M = divergence_lab.random_metric_matrix(n, rng)
        bad = sum(not divergence_lab.weak_indiscernibles_check(
            divergence_lab.sample_marginal(n, rng), M, float(o["lambda"]), q)
            for _ in range(trials))
        result = {"q": q, "trials": trials, "violations": bad}
    _write(os.path.join(out, f"sweep_{o['kind']}.json"), _dump(result))
    print(json.dumps(result)[:400])
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "synth": cmd_synth, "cv": cmd_cv,
            "infer": cmd_infer, "sweep": cmd_sweep}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
