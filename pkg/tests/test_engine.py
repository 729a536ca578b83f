import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvbsde import convex as cv
from mvbsde import generators as gl
from mvbsde.driving import Clock, GridConfig, Terminal, compute_weights, simulate
from mvbsde.engine import (
    Problem,
    SolverOptions,
    StepConstraintError,
    effective_generator,
    implicit_penalty_step,
    obstacle_value,
    penalty_energy,
    refine_epsilon,
    save_arrays,
    solution_rows,
    solution_summary,
    solve_penalized,
    solve_random_horizon,
    subdiff_test,
    truncate_problem,
    truncation_level,
)
from mvbsde.oracles import linear_on_ensemble

IMPLICIT = SolverOptions(penalty="implicit")


@pytest.fixture(scope="module")
def ens():
    return simulate(GridConfig(K=50, N=4000, seed=11))


@pytest.fixture(scope="module")
def reflected(ens):
    problem = Problem(gl.linear(drift=-1.0), cv.interval(0, np.inf), cv.zero(), Terminal("constant", 0.0))
    return problem, refine_epsilon(ens, problem, [0.4, 0.2, 0.1], 0.1, IMPLICIT)


def test_linear_problem_matches_closed_form(ens):
    eta = Terminal("square", scale=1.0)
    problem = Problem(gl.linear(rho=1.0), cv.zero(), cv.zero(), eta)
    sol = solve_penalized(ens, problem, 0.1)
    exact = linear_on_ensemble(1.0, eta, ens)
    assert abs(sol.y0[0] - exact[0, 0]) <= 3 * ens.dt + 3 * sol.y0_se + 1e-12
    assert np.sqrt(np.mean((sol.Y[:, :, 0] - exact) ** 2)) < 0.05


def test_brownian_terminal_gives_unit_integrand(ens):
    problem = Problem(gl.zero_driver(), cv.zero(), cv.zero(), Terminal("brownian", scale=1.0))
    sol = solve_penalized(ens, problem, 0.1)
    # Z regresses dB^2 / dt, whose standard deviation is sqrt(2)
    per_node = sol.Z[..., 0, 0].mean(axis=0)
    assert np.max(np.abs(per_node - 1.0)) < 4 * np.sqrt(2 / ens.N) * 2
    assert np.sqrt(np.mean((sol.Y[:, :, 0] - ens.B[:, :, 0]) ** 2)) < 0.05


def test_reflected_solution(reflected):
    _, sol = reflected
    assert np.all(sol.Y_proj >= 0)
    assert np.mean(np.diff(sol.K, axis=1)) >= 0
    res = sol.cauchy_residuals
    assert all(b < a for a, b in zip(res, res[1:]))
    y0 = sol.y0_history
    assert all(b > a for a, b in zip(y0, y0[1:])) and y0[-1] < 0
    assert sol.converged


def test_subdifferential_inclusion(reflected, ens):
    problem, sol = reflected
    out = subdiff_test(sol, ens, problem.phi, problem.psi,
                       {"half": lambda t: [0.5], "one": np.ones_like(sol.Y), "neg": lambda t: [-1.0]},
                       windows=[(0, ens.K), (25, ens.K)])
    assert out["neg"]["skipped"]
    for name in ("half", "one"):
        for row in out[name]["windows"]:
            assert row["residual"] <= ens.dt + 3 * row["se"]


def test_penalty_energy_nonnegative(reflected, ens):
    _, sol = reflected
    assert penalty_energy(sol.final, compute_weights(ens, gl.linear(), 2.0, 0.5)) >= 0


def test_explicit_penalty_step_constraint(ens):
    problem = Problem(gl.zero_driver(), cv.interval(0, np.inf), cv.zero(), Terminal())
    with pytest.raises(StepConstraintError) as info:
        solve_penalized(ens, problem, 0.01)
    assert info.value.min_steps == 200


def test_implicit_needs_supported_obstacle_pair():
    ens = simulate(GridConfig(K=10, N=100, clock=Clock("linear", 1.0)))
    problem = Problem(gl.zero_driver(), cv.interval(0, np.inf), cv.quadratic(), Terminal())
    with pytest.raises(ValueError):
        solve_penalized(ens, problem, 0.1, IMPLICIT)


def test_schedule_validation(ens):
    problem = Problem(gl.zero_driver(), cv.zero(), cv.zero(), Terminal())
    with pytest.raises(ValueError):
        refine_epsilon(ens, problem, [0.1], 1.0)
    with pytest.raises(ValueError):
        refine_epsilon(ens, problem, [0.1, 0.2], 1.0)
    with pytest.raises(ValueError):
        solve_penalized(ens, problem, 0.0)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(penalty="magic")
    with pytest.raises(ValueError):
        SolverOptions(mollify="sometimes")


def test_non_lipschitz_driver_is_mollified():
    gen = gl.cubic_monotone()
    assert effective_generator(gen, 0.1, SolverOptions()).tag == "cubic~moll"
    assert effective_generator(gen, 0.1, SolverOptions(mollify="never")) is gen
    lin = gl.linear(1.0)
    assert effective_generator(lin, 0.1, SolverOptions()) is lin


def test_random_horizon_pins_solution():
    ens = simulate(GridConfig(K=50, N=2000, seed=3, exit_level=0.6))
    problem = Problem(gl.linear(rho=1.0), cv.zero(), cv.zero(), Terminal("brownian", scale=1.0))
    sol = solve_random_horizon(ens, problem, [0.2, 0.1], 1.0)
    eta = problem.terminal(ens)
    after = ~ens.in_horizon
    assert after.any()
    np.testing.assert_array_equal(sol.Y[after], np.broadcast_to(eta[:, None], sol.Y.shape)[after])
    assert np.all(sol.Z[~ens.active] == 0)
    with pytest.raises(ValueError):
        solve_random_horizon(simulate(GridConfig(K=5, N=10)), problem, [0.2, 0.1], 1.0)


def test_truncation_with_large_level_is_identity(ens):
    problem = Problem(gl.linear(rho=1.0, drift=0.5), cv.zero(), cv.zero(), Terminal("brownian"))
    beta = truncation_level(ens, problem)
    assert np.all(np.diff(beta, axis=1) >= -1e-12)
    big, keep, _ = truncate_problem(problem, 1e6, ens)
    assert keep.all()
    a = solve_penalized(ens, problem, 0.1)
    b = solve_penalized(ens, big, 0.1)
    np.testing.assert_allclose(a.Y, b.Y, atol=1e-12)


def test_truncation_at_zero_kills_everything(ens):
    problem = Problem(gl.linear(rho=1.0, drift=0.5), cv.zero(), cv.zero(), Terminal("brownian"))
    small, keep, _ = truncate_problem(problem, 0.0, ens)
    sol = solve_penalized(ens, small, 0.1)
    assert not keep.all()
    np.testing.assert_allclose(sol.Y[~keep, -1], 0.0)
    with pytest.raises(ValueError):
        truncate_problem(problem, -1.0, ens)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=8, max_size=8), st.floats(0.01, 1.0), st.floats(0, 0.5))
def test_implicit_step_solves_its_equation(xs, eps, dq):
    phi = cv.interval(-1.0, 2.0)
    x = np.array(xs)[:, None]
    alpha = np.ones(8)
    y = implicit_penalty_step(phi, cv.zero(), x, alpha, np.full(8, dq), eps)
    resid = y + dq * cv.yosida_grad(phi, y, eps) - x
    assert np.max(np.abs(resid)) <= 1e-10


def test_obstacle_value_ignores_inactive_infinite_part():
    y = np.array([[-1.0], [0.5]])
    out = obstacle_value(cv.interval(0, 1), cv.quadratic(), y, np.array([0.0, 1.0]))
    np.testing.assert_allclose(out, [0.5, 0.0])


def test_exports(reflected, tmp_path):
    _, sol = reflected
    header, rows = solution_rows(sol, max_paths=3)
    assert header == ["path", "step", "Y1", "Z1_1", "K1"]
    assert len(rows) == 3 * sol.Y.shape[1]
    summary = solution_summary(sol)
    assert summary["mean_dK"] >= 0 and summary["converged"]
    save_arrays(sol, tmp_path / "arr")
    assert sorted(os.listdir(tmp_path / "arr")) == ["K.npy", "Y.npy", "Y_proj.npy", "Z.npy", "meta.json"]
    np.testing.assert_array_equal(np.load(tmp_path / "arr" / "Y.npy"), sol.Y)
    assert json.loads((tmp_path / "arr" / "meta.json").read_text())["y0_se"] == sol.y0_se
