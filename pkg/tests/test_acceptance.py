"""Acceptance criteria at full desk scale.

Every test records one PASS/FAIL line (shown in the terminal summary) and
fails on a violated criterion or an exceeded time budget.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, optimize

from mvbsde import cli
from mvbsde import config as cf
from mvbsde import convex as cv
from mvbsde import generators as gl
from mvbsde import verify as vf
from mvbsde.driving import GridConfig, Terminal, compute_weights, martingale_pair, simulate
from mvbsde.engine import Problem, SolverOptions, refine_epsilon, solve_penalized
from mvbsde.oracles import TreeConfig, tree_solve

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

PATHS = 20_000
STEPS = 100
SCHEDULE = [0.4, 0.2, 0.1, 0.05]
IMPLICIT = SolverOptions(penalty="implicit", degree=3)


def reflected_problem():
    return Problem(gl.linear(rho=0.0, drift=-1.0), cv.interval(0, np.inf), cv.zero(),
                   Terminal("constant", 0.0))


@pytest.fixture(scope="module")
def reflected_run():
    """Solution shared by criteria 4 and 5, with its own timing."""
    start = time.perf_counter()
    problem = reflected_problem()
    ens = simulate(GridConfig(K=STEPS, N=PATHS, seed=1))
    ens = compute_weights(ens, problem.gen, problem.p, problem.lam)
    sol = refine_epsilon(ens, problem, SCHEDULE, 0.1, IMPLICIT)
    return ens, problem, sol, time.perf_counter() - start


def test_1_convex_core_exactness(record_acceptance):
    start = time.perf_counter()
    rows = cv.property_suite(n=10_000, seed=2024, tol=1e-12)
    elapsed = time.perf_counter() - start
    worst = max(c["worst"] for r in rows for c in r["checks"].values())
    ok = all(r["passed"] for r in rows)
    assert record_acceptance(1, ok, f"{len(rows)} specs x 10^4 samples, worst residual {worst:.2e} <= 1e-12",
                             elapsed, 5)


def _quad_reference(gen, eps, t, y, z, st):
    zb = gl.beta_trunc(z, eps)

    def f_at(u):
        return gen.F(t, np.array([[y - eps * u]]), zb[None], st)[0, 0]

    def level(u):
        return eps * abs(gen.F(t, np.array([[y - eps * u]]), np.zeros((1, 1, 1)), st)[0, 0]) - 1

    def gate(u):
        return level(u) <= 0

    us = np.linspace(-1, 1, 2001)
    g = np.array([gate(u) for u in us])
    cuts = [optimize.brentq(level, us[j], us[j + 1], xtol=1e-15) for j in np.nonzero(g[1:] != g[:-1])[0]]
    edges = [-1.0] + cuts + [1.0]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        if gate(0.5 * (lo + hi)):
            total += integrate.quad(lambda u: f_at(u) * gl.bump(np.array([u])), lo, hi,
                                    epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return total


def test_2_mollifier_bounds(record_acceptance):
    start = time.perf_counter()
    worst, ok = {}, True
    for gen in gl.mollifier_catalog():
        rep = gl.mollifier_suite(gen, n=1000, seed=7, tol=1e-6)
        ok = ok and rep["passed"]
        worst[gen.tag] = max(c["worst"] for c in rep["checks"].values())
        # independent adaptive quadrature with root-found gate switches
        s = gl.random_samples(gen, 12, seed=99)
        cfg = gl.MollifierConfig(0.25)
        gap = 0.0
        for j in range(12):
            st = s.state.take(np.array([j]))
            ref = _quad_reference(gen, 0.25, s.t[j:j + 1], s.y[j, 0], s.z[j], st)
            got = gl.mollify_F(gen, cfg, s.t[j:j + 1], s.y[j:j + 1], s.z[j:j + 1], st)[0, 0]
            gap = max(gap, abs(got - ref))
        ok = ok and gap <= 1e-6
        worst[gen.tag + "_quad"] = gap
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:+.1e}" for k, v in worst.items())
    assert record_acceptance(2, ok, f"3 drivers x 10^3 samples, worst excess: {detail}", elapsed, 30)


def test_3_linear_oracle(record_acceptance):
    start = time.perf_counter()
    problem = Problem(gl.linear(rho=1.0), cv.zero(), cv.zero(), Terminal("constant", 1.0))
    ens = simulate(GridConfig(K=STEPS, N=PATHS, seed=1))
    sol = solve_penalized(ens, problem, 0.1, SolverOptions(degree=3))
    elapsed = time.perf_counter() - start
    y0 = float(sol.y0[0])
    tol = 5e-3 + 3 * sol.y0_se
    err = abs(y0 - np.exp(-1.0))
    assert record_acceptance(3, err <= tol, f"Y0 {y0:.6f} vs e^-1, |diff| {err:.2e} <= {tol:.2e}",
                             elapsed, 30)


def test_4_reflected_convergence(record_acceptance, reflected_run):
    ens, problem, sol, solve_time = reflected_run
    start = time.perf_counter()
    root = tree_solve(TreeConfig(512), problem.gen, problem.phi, problem.eta).root
    elapsed = solve_time + time.perf_counter() - start
    y0 = float(sol.y0[0])
    res = sol.cauchy_residuals
    decreasing = all(b < a for a, b in zip(res, res[1:]))
    mean_dk = float(np.mean(np.diff(sol.K, axis=1)))
    ok = abs(y0 - root) <= 5e-2 and decreasing and mean_dk >= 0
    detail = (f"Y0 {y0:.7f} vs tree {root:.4f} (|diff| {abs(y0 - root):.7f} <= 5e-2), "
              f"residuals {', '.join(f'{r:.3g}' for r in res)}, mean dK {mean_dk:.2e}")
    assert record_acceptance(4, ok, detail, elapsed, 120)


def test_5_variational_suite(record_acceptance, reflected_run):
    ens, problem, sol, _ = reflected_run
    start = time.perf_counter()
    pair = martingale_pair(problem.eta, ens)
    tms = [vf.constant_martingale(0.0, ens), vf.constant_martingale(0.5, ens), vf.pair_martingale(pair),
           vf.midpoint_martingale(sol, ens, 0.5, 0.1), vf.solution_martingale(sol, ens)]
    windows = [(0, ens.K), (ens.K // 2, ens.K)]
    reports = [vf.check_def1(sol, ens, problem, tms, (0.01, 0.5), windows, p=p) for p in (1.5, 2.0)]
    good = all(r.passed for r in reports)
    n_rows = sum(len(r.rows) for r in reports)
    worst = max((row["residual"] - row["tolerance"]) for r in reports for row in r.rows)
    # deliberately unconverged control: two coarse penalty levels only
    coarse = refine_epsilon(ens, problem, [0.8, 0.4], 0.1, IMPLICIT)
    control = vf.check_def1(coarse, ens, problem, tms[:4], (0.01, 0.5), windows, p=2.0, psi_eps=0.05)
    elapsed = time.perf_counter() - start
    failing = sum(not row["passed"] for row in control.rows)
    ok = good and not control.passed
    detail = (f"{n_rows} tuples pass (worst residual - tolerance {worst:+.2e}); "
              f"coarse control fails {failing}/{len(control.rows)}")
    assert record_acceptance(5, ok, detail, elapsed, 60)


def test_6_ito_residual_order(record_acceptance):
    start = time.perf_counter()
    problem = Problem(gl.linear(rho=1.0, drift=4.0), cv.zero(), cv.zero(), Terminal("brownian"))
    means = {}
    for K in (STEPS, 2 * STEPS):
        ens = simulate(GridConfig(K=K, N=PATHS, seed=1))
        sol = solve_penalized(ens, problem, 0.1)
        for p, delta in ((1.5, 0.01), (2.0, 0.0)):
            rep = vf.ito_report(sol.Y, sol.Z, ens, p, delta)
            means[(p, delta, K)] = rep
    elapsed = time.perf_counter() - start
    parts, ok = [], True
    for p, delta in ((1.5, 0.01), (2.0, 0.0)):
        r1 = abs(means[(p, delta, STEPS)]["identity_residual"])
        r2 = abs(means[(p, delta, 2 * STEPS)]["identity_residual"])
        ratio = r1 / r2
        ok = ok and ratio >= 1.8 and all(means[(p, delta, K)]["one_sided_ok"] for K in (STEPS, 2 * STEPS))
        parts.append(f"(p={p:g}, delta={delta:g}) ratio {ratio:.3f}")
    assert record_acceptance(6, ok, "; ".join(parts) + " (>= 1.8)", elapsed, 60)


def test_7_continuity_and_uniqueness(record_acceptance):
    start = time.perf_counter()
    problem = Problem(gl.linear(rho=1.0), cv.zero(), cv.zero(), Terminal("square"))
    grid = GridConfig(K=STEPS, N=PATHS, seed=1)
    cont = vf.check_continuity(problem, grid, [0.2, 0.1, 0.05], alpha=0.5, q=2.0)
    uni = vf.check_uniqueness(problem, grid, [1, 2])
    elapsed = time.perf_counter() - start
    ok = cont["passed"] and uni["passed"]
    ds = ", ".join(f"{r['distance']:.4f}" for r in cont["rows"])
    detail = (f"D(h) {ds} decreasing={cont['decreasing']}, spread {cont['spread']:.3f} < 3; "
              f"Y0 seeds {uni['y0'][0]:.4f}/{uni['y0'][1]:.4f}, |diff| {uni['difference']:.2e} "
              f"<= 3 SE {uni['bound']:.2e}")
    assert record_acceptance(7, ok, detail, elapsed, 120)


def test_8_smoothing(record_acceptance):
    start = time.perf_counter()
    cfg = cf.parse_config(f"numerics.paths = {PATHS}\nnumerics.steps = {STEPS}\nnumerics.seed = 1\n"
                          "smoothing.eps_list = 0.2, 0.1, 0.05\n")
    table = cli.smoothing_table(cfg)
    elapsed = time.perf_counter() - start
    errs = ", ".join(f"{r['max_error']:.4f}" for r in table["rows"])
    bound = all(r["bound_passed"] for r in table["rows"])
    detail = (f"constant error {table['constant_error']:.1e} <= 1e-12; errors {errs} "
              f"decreasing={table['decreasing']}; bound check {'ok' if bound else 'violated'}")
    assert record_acceptance(8, table["passed"], detail, elapsed, 20)


def _artifact_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            data = open(path, "rb").read()
            if name.endswith((".csv", ".json")):
                data = b"\n".join(ln for ln in data.split(b"\n")
                                  if not ln.startswith(b"# generated:") and b'"timestamp"' not in ln)
            out[os.path.relpath(path, root)] = data
    return out


def test_9_reproducibility(record_acceptance, tmp_path):
    start = time.perf_counter()
    cfg = str(CONFIGS / "reflected_lower0.cfg")
    runs = []
    for threads in (1, 4):
        out = tmp_path / f"solve_t{threads}"
        assert cli.main(["solve", "--config", cfg, "--out", str(out), "--threads", str(threads)]) == 0
        vout = tmp_path / f"verify_t{threads}"
        assert cli.main(["verify", "--config", cfg, "--solution", str(out), "--out", str(vout),
                         "--threads", str(threads)]) == 0
        runs.append({**{f"solve/{k}": v for k, v in _artifact_bytes(out).items()},
                     **{f"verify/{k}": v for k, v in _artifact_bytes(vout).items()}})
    elapsed = time.perf_counter() - start
    same = runs[0] == runs[1]
    detail = f"{len(runs[0])} artifacts byte-identical for 1 and 4 threads (timestamp line excluded): {same}"
    assert record_acceptance(9, same, detail, elapsed, 120)
