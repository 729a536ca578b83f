"""Command line runner: property suites, solves, refinement tables and checks."""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime
import json
import os
import shutil
import sys
import tempfile

import numpy as np

from . import config as cf
from . import convex as cv
from . import generators as gl
from .driving import (
    PathEnsemble,
    compute_weights,
    martingale_pair,
    exp_smooth,
    simulate,
    smoothing_bound_check,
)
from .engine import (
    MultivaluedSolution,
    refine_epsilon,
    solution_rows,
    solution_summary,
)
from .oracles import TreeConfig, linear_closed_form, tree_solve
from . import verify as vf

SCHEMA_VERSION = 1
ARRAYS = ("Y", "Z", "K", "Y_proj")


def _timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get("MVBSDE_THREADS")
    return int(env) if env else 1


@contextlib.contextmanager
def staged_output(out):
    """Yield a scratch directory whose files land in ``out`` only on success."""
    out = os.path.abspath(out)
    parent = os.path.dirname(out)
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".mvbsde-", dir=parent)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.makedirs(out, exist_ok=True)
    for name in sorted(os.listdir(tmp)):
        dest = os.path.join(out, name)
        if os.path.isdir(dest):
            shutil.rmtree(dest)
        os.replace(os.path.join(tmp, name), dest)
    shutil.rmtree(tmp, ignore_errors=True)


def _header(command: str, config_text: str):
    """Comment lines for CSV files; the timestamp is alone on the first line."""
    lines = [f"generated: {_timestamp()}", f"schema_version: {SCHEMA_VERSION}", f"command: {command}"]
    lines += [f"config: {ln}" for ln in config_text.splitlines()]
    return lines


def write_json(path, payload: dict, command: str, config_text: str):
    data = dict(payload, schema_version=SCHEMA_VERSION, command=command, config=config_text,
                timestamp=_timestamp())
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_csv(path, header, rows, command: str, config_text: str):
    with open(path, "w", newline="") as fh:
        for line in _header(command, config_text):
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load(args):
    cfg = cf.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_values(numerics__seed=int(args.seed))
        cf._validate(cfg)
    return cfg


# ---------------------------------------------------------------- prox-suite


def _faulty_prox(spec, y, eps):
    return 1.5 * cv.prox(spec, y, eps)


def cmd_prox_suite(args) -> int:
    eps_list = [None] if not args.eps_list else [float(e) for e in args.eps_list.split(",")]
    prox_fn = _faulty_prox if args.inject_fault else None
    results = []
    ok = True
    print(f"{'spec':48s} {'eps':>8s}  nonexp  lipsch  envel  cauchy  sandw")
    for e in eps_list:
        for row in cv.property_suite(n=args.samples, eps=e, seed=args.seed, prox_fn=prox_fn):
            row["eps"] = "random" if e is None else e
            results.append(row)
            marks = "  ".join(" ok  " if c["passed"] else "FAIL " for c in row["checks"].values())
            print(f"{row['spec']:48s} {str(row['eps']):>8s}  {marks}")
            for name, c in row["checks"].items():
                if not c["passed"]:
                    print(f"  violation {name}: residual {c['worst']:.3e} at {c['sample']}")
            ok = ok and row["passed"]
    print("all passed" if ok else "FAILED")
    if args.out:
        with staged_output(args.out) as tmp:
            write_json(os.path.join(tmp, "prox_suite.json"), {"passed": ok, "rows": results},
                       "prox-suite", f"samples = {args.samples}\nseed = {args.seed}\n")
    return 0 if ok else 1


# ---------------------------------------------------------------- mollifier-suite


def cmd_mollifier_suite(args) -> int:
    ok = True
    results = []
    for gen in gl.mollifier_catalog():
        rep = gl.mollifier_suite(gen, n=args.samples, seed=args.seed, nodes=args.nodes)
        results.append(rep)
        print(f"{rep['generator']}: {'ok' if rep['passed'] else 'FAIL'}")
        for name, c in rep["checks"].items():
            flag = "ok  " if c["passed"] else "FAIL"
            print(f"  {name:12s} {flag} worst excess {c['worst']:+.3e}")
            if not c["passed"]:
                print(f"    at {c['sample']}")
        ok = ok and rep["passed"]
    if args.out:
        with staged_output(args.out) as tmp:
            write_json(os.path.join(tmp, "mollifier_suite.json"), {"passed": ok, "rows": results},
                       "mollifier-suite", f"samples = {args.samples}\nseed = {args.seed}\nnodes = {args.nodes}\n")
    return 0 if ok else 1


# ---------------------------------------------------------------- solve / converge


def _solve_from_config(cfg, threads):
    problem = cf.build_problem(cfg)
    ens = simulate(cf.build_grid(cfg), threads)
    ens = compute_weights(ens, problem.gen, problem.p, problem.lam)
    sol = refine_epsilon(ens, problem, cf.eps_schedule(cfg), cfg["numerics.tol"], cf.build_options(cfg))
    return problem, ens, sol


def _oracle(kind, cfg, problem, sol) -> dict:
    if kind in (None, "none"):
        return {"kind": "none"}
    T = cfg["problem.horizon"]
    if cfg["problem.clock"] != "none" or cfg["problem.exit_level"] is not None:
        raise ValueError("oracles need a fixed horizon and no increasing clock")
    if kind == "tree":
        ref = tree_solve(TreeConfig(cfg["numerics.tree_steps"], T), problem.gen, problem.phi, problem.eta).root
    else:
        if (cfg["problem.generator"] != "linear" or cfg["problem.drift"] != 0
                or problem.phi.kind != "zero" or problem.psi.kind != "zero"):
            raise ValueError("closed-form oracle needs F = -rho y without obstacles")
        ref = float(linear_closed_form(cfg["problem.rho"], problem.eta, 0.0, 0.0, T))
    y0 = float(sol.y0[0])
    tol = cfg["numerics.oracle_tol"] + 3 * sol.y0_se
    return {"kind": kind, "y0": ref, "difference": y0 - ref, "tolerance": tol,
            "within": bool(abs(y0 - ref) <= tol)}


def cmd_solve(args) -> int:
    cfg = _load(args)
    text = cfg.text()
    with staged_output(args.out) as tmp:
        problem, ens, sol = _solve_from_config(cfg, _threads(args))
        summary = solution_summary(sol)
        summary["oracle"] = _oracle(args.oracle, cfg, problem, sol)
        header, rows = solution_rows(sol, cfg["output.max_paths"])
        write_csv(os.path.join(tmp, "solution.csv"), header, rows, "solve", text)
        write_json(os.path.join(tmp, "summary.json"), summary, "solve", text)
        arr = os.path.join(tmp, "arrays")
        os.makedirs(arr)
        for name in ARRAYS:
            np.save(os.path.join(arr, f"{name}.npy"), getattr(sol, name), allow_pickle=False)
        write_json(os.path.join(arr, "meta.json"), summary, "solve", text)
    print(f"Y0 = {summary['y0_mean'][0]:.6f} +- {summary['y0_se']:.2e}")
    _print_history(sol)
    o = summary["oracle"]
    if o["kind"] != "none":
        print(f"oracle ({o['kind']}): {o['y0']:.6f}, difference {o['difference']:+.2e}, "
              f"tolerance {o['tolerance']:.2e}, {'within' if o['within'] else 'OUTSIDE'}")
    return 0


def _print_history(sol):
    print(f"{'eps':>8s} {'residual':>12s} {'energy':>12s} {'Y0':>12s}")
    res = [float("nan")] + list(sol.cauchy_residuals)
    for e, r, en, y in zip(sol.eps_schedule, res, sol.penalty_energy, sol.y0_history):
        print(f"{e:8.4g} {r:12.5g} {en:12.5g} {y:12.6f}")


def cmd_converge(args) -> int:
    cfg = _load(args)
    text = cfg.text()
    with staged_output(args.out) as tmp:
        _, _, sol = _solve_from_config(cfg, _threads(args))
        res = [None] + list(sol.cauchy_residuals)
        rows = [[repr(e), "" if r is None else repr(r), repr(en), repr(y)]
                for e, r, en, y in zip(sol.eps_schedule, res, sol.penalty_energy, sol.y0_history)]
        write_csv(os.path.join(tmp, "converge.csv"), ["eps", "residual", "penalty_energy", "y0"], rows,
                  "converge", text)
        write_json(os.path.join(tmp, "converge.json"), solution_summary(sol), "converge", text)
    _print_history(sol)
    print("converged" if sol.converged else "NOT converged")
    return 0 if sol.converged else 1


# ---------------------------------------------------------------- verify


def load_solution(path, ens: PathEnsemble, text: str) -> MultivaluedSolution:
    arr = os.path.join(path, "arrays")
    meta_path = os.path.join(arr, "meta.json")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"no solution arrays under {path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("config") != text:
        raise ValueError("solution was produced with a different configuration")
    data = {name: np.load(os.path.join(arr, f"{name}.npy"), allow_pickle=False) for name in ARRAYS}
    if data["Y"].shape[:2] != (ens.N, ens.K + 1):
        raise ValueError("solution arrays do not match the configured grid")
    return MultivaluedSolution(data["Y"], data["Z"], data["K"], data["Y_proj"], meta["eps_schedule"],
                               meta["cauchy_residuals"], meta["penalty_energy"], meta["y0_history"],
                               meta["y0_se"], meta["converged"], None)


def _pair(problem, ens, degree):
    try:
        return martingale_pair(problem.eta, ens, "closed")
    except ValueError:
        return martingale_pair(problem.eta, ens, "regression", degree)


def run_checks(cfg, ens, sol, problem):
    """Execute the configured checks; returns ``(verdicts, def1 reports)``."""
    checks = cfg["checks.run"]
    degree = cfg["numerics.degree"]
    grid = cf.build_grid(cfg)
    opts = cf.build_options(cfg)
    schedule = cf.eps_schedule(cfg)
    out, reports = {}, []
    pair = _pair(problem, ens, degree) if ("def1" in checks or "terminal" in checks) else None
    if "def1" in checks:
        m = problem.gen.m
        mart = [vf.constant_martingale(c, ens, m) for c in cfg["checks.constants"]]
        mart.append(vf.pair_martingale(pair))
        mart.append(vf.midpoint_martingale(sol, ens, cfg["checks.anchor"], cfg["checks.smooth_eps"], degree))
        for p in cfg["checks.p_values"]:
            rep = vf.check_def1(sol, ens, problem, mart, cfg["checks.deltas"], cf.windows(cfg, ens.K), p=p)
            reports.append(rep)
            out[f"def1_p{p:g}"] = rep.to_dict()
    if "terminal" in checks:
        out["terminal"] = vf.check_terminal(sol, ens, pair, problem.p)
    if "apriori" in checks:
        out["apriori"] = vf.check_apriori(sol, ens, problem)
    if "ito" in checks:
        rows = [vf.ito_report(sol.Y, sol.Z, ens, p, d)
                for p, d in zip(cfg["checks.ito_p"], cfg["checks.ito_delta"])]
        out["ito"] = {"rows": rows, "passed": all(r["one_sided_ok"] for r in rows)}
    if "uniqueness" in checks:
        out["uniqueness"] = vf.check_uniqueness(problem, grid, cfg["checks.seeds"], schedule, opts)
    if "continuity" in checks:
        out["continuity"] = vf.check_continuity(problem, grid, cfg["checks.shifts"], schedule, opts)
    return out, reports


def cmd_verify(args) -> int:
    cfg = _load(args)
    text = cfg.text()
    problem = cf.build_problem(cfg)
    ens = compute_weights(simulate(cf.build_grid(cfg), _threads(args)), problem.gen, problem.p, problem.lam)
    sol = load_solution(args.solution, ens, text)
    with staged_output(args.out) as tmp:
        verdicts, reports = run_checks(cfg, ens, sol, problem)
        ok = all(v["passed"] for v in verdicts.values())
        write_json(os.path.join(tmp, "verify.json"), {"passed": ok, "checks": verdicts}, "verify", text)
        for rep in reports:
            vf.write_def1_csv(rep, os.path.join(tmp, f"def1_p{rep.meta['p']:g}.csv"),
                              _header("verify", text))
    for name, v in verdicts.items():
        print(f"{name:16s} {'pass' if v['passed'] else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------- smooth-demo


def smoothing_table(cfg, threads: int = 1) -> dict:
    ens = simulate(cf.build_grid(cfg), threads)
    degree = cfg["numerics.degree"]
    ones = np.ones((ens.N, ens.K + 1))
    const_err = float(np.max(np.abs(exp_smooth(ones, ens, cfg["smoothing.eps_list"][0], degree) - 1.0)))
    U = ens.B[:, :, 0]
    rows = []
    for e in cfg["smoothing.eps_list"]:
        M = exp_smooth(U, ens, e, degree)
        err = float(np.mean(np.max(np.abs(M - U), axis=1)))
        bound = smoothing_bound_check(U, ens, e, degree)
        rows.append({"eps": e, "max_error": err, "bound_excess": bound["worst_excess"],
                     "bound_tolerance": bound["tolerance"], "bound_passed": bound["passed"]})
    errs = [r["max_error"] for r in rows]
    decreasing = all(b < a for a, b in zip(errs, errs[1:]))
    ok = const_err <= 1e-12 and decreasing and all(r["bound_passed"] for r in rows)
    return {"constant_error": const_err, "rows": rows, "decreasing": decreasing, "passed": ok}


def cmd_smooth_demo(args) -> int:
    cfg = _load(args)
    text = cfg.text()
    with staged_output(args.out) as tmp:
        table = smoothing_table(cfg, _threads(args))
        rows = [[repr(r["eps"]), repr(r["max_error"]), repr(r["bound_excess"]), int(r["bound_passed"])]
                for r in table["rows"]]
        write_csv(os.path.join(tmp, "smoothing.csv"), ["eps", "max_error", "bound_excess", "bound_passed"],
                  rows, "smooth-demo", text)
        write_json(os.path.join(tmp, "smoothing.json"), table, "smooth-demo", text)
    print(f"constant process error {table['constant_error']:.2e}")
    print(f"{'eps':>8s} {'max error':>12s} {'bound':>6s}")
    for r in table["rows"]:
        print(f"{r['eps']:8.4g} {r['max_error']:12.5g} {'ok' if r['bound_passed'] else 'FAIL':>6s}")
    return 0 if table["passed"] else 1


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvbsde", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", required=config, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override numerics.seed")
        p.add_argument("--threads", type=int, default=None,
                       help="simulation threads (default: MVBSDE_THREADS or 1)")

    p = sub.add_parser("prox-suite", help="resolvent and envelope property suite")
    common(p, config=False)
    p.add_argument("--eps-list", default=None, help="comma-separated fixed eps values")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_prox_suite, seed=0)

    p = sub.add_parser("mollifier-suite", help="mollifier bound suite over the driver catalog")
    common(p, config=False)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--nodes", type=int, default=48)
    p.set_defaults(func=cmd_mollifier_suite, seed=0)

    for name, func, text in (("solve", cmd_solve, "solve along the eps schedule"),
                             ("converge", cmd_converge, "eps refinement table"),
                             ("smooth-demo", cmd_smooth_demo, "exponential smoothing table")):
        p = sub.add_parser(name, help=text)
        common(p)
        if name == "solve":
            p.add_argument("--oracle", choices=("tree", "closed", "none"), default="none")
        p.set_defaults(func=func)

    p = sub.add_parser("verify", help="run the configured checks on a stored solution")
    common(p)
    p.add_argument("--solution", required=True, help="output directory of a previous solve")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
