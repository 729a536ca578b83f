import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvbsde import generators as gl
from mvbsde.driving import (
    Clock,
    GridConfig,
    Regressor,
    RegressionError,
    ResourceLimitError,
    Terminal,
    compute_weights,
    conditional_expectation,
    ensemble_rows,
    exp_smooth,
    martingale_pair,
    simulate,
    smooth_pathwise,
    smoothing_bound_check,
)


@pytest.fixture(scope="module")
def ens():
    return simulate(GridConfig(T=1.0, K=50, N=4000, seed=7))


def test_shapes_and_grid(ens):
    assert ens.B.shape == (4000, 51, 1) and ens.dB.shape == (4000, 50, 1)
    np.testing.assert_allclose(ens.t, np.linspace(0, 1, 51))
    np.testing.assert_array_equal(ens.B[:, 0], 0.0)
    np.testing.assert_allclose(np.diff(ens.B, axis=1), ens.dB, atol=1e-14)
    assert ens.active.all() and ens.in_horizon.all()
    np.testing.assert_array_equal(ens.alpha, 1.0)


def test_increment_moments(ens):
    assert abs(ens.dB.mean()) < 4 * np.sqrt(ens.dt / ens.dB.size)
    assert ens.dB.var() == pytest.approx(ens.dt, rel=0.02)


def test_paths_do_not_depend_on_ensemble_size_or_threads():
    small = simulate(GridConfig(K=20, N=30, seed=3))
    big = simulate(GridConfig(K=20, N=90, seed=3), threads=4)
    np.testing.assert_array_equal(small.B, big.B[:30])


def test_seed_changes_paths():
    a = simulate(GridConfig(K=10, N=10, seed=1))
    b = simulate(GridConfig(K=10, N=10, seed=2))
    assert not np.array_equal(a.B, b.B)


def test_linear_clock():
    ens = simulate(GridConfig(K=10, N=5, clock=Clock("linear", 2.0)))
    np.testing.assert_allclose(ens.alpha, 1 / 3)
    np.testing.assert_allclose(ens.Q[:, -1], 3.0)


def test_integral_clock_adds_regression_feature():
    ens = simulate(GridConfig(K=10, N=5, clock=Clock("integral", 1.0, "abs")))
    np.testing.assert_allclose(ens.dA, np.abs(ens.B[:, :-1, 0]) * ens.dt)
    assert ens.features(3).shape == (5, 2)
    assert np.all((ens.alpha > 0) & (ens.alpha <= 1))


def test_exit_time_horizon():
    ens = simulate(GridConfig(K=100, N=500, seed=2, exit_level=0.5))
    b = np.abs(ens.B[:, :, 0])
    for p in range(20):
        j = ens.exit_index[p]
        assert np.all(b[p, :j] < 0.5)
        assert j == 100 or b[p, j] >= 0.5
        assert ens.active[p].sum() == j


@pytest.mark.parametrize("kwargs", [dict(K=0), dict(N=0), dict(T=-1.0), dict(seed=-1),
                                    dict(exit_level=0.0)])
def test_grid_validation(kwargs):
    with pytest.raises(ValueError):
        GridConfig(**kwargs)


def test_cell_cap():
    with pytest.raises(ResourceLimitError):
        simulate(GridConfig(K=100, N=100, cell_cap=1000))


def test_clock_validation():
    with pytest.raises(ValueError):
        Clock("weird")
    with pytest.raises(ValueError):
        Clock("linear", -1.0)


def test_weights_for_linear_driver(ens):
    w = compute_weights(ens, gl.linear(rho=1.0), 2.0, 0.5)
    V, Vp = w.weights()
    np.testing.assert_allclose(V[0], -ens.t)
    np.testing.assert_array_equal(Vp, 0.0)
    with pytest.raises(ValueError):
        compute_weights(ens, gl.linear(), 1.0, 0.5)


def test_regressor_reproduces_polynomials():
    x = np.linspace(-2, 2, 200)
    target = 1 + x - 0.5 * x ** 3
    np.testing.assert_allclose(Regressor(x, 3).project(target), target, atol=1e-10)


def test_regressor_lowers_degree_with_few_rows():
    reg = Regressor(np.array([0.0, 1.0, 2.0]), 3)
    assert reg.diagnostics.degree == 2


def test_regressor_rejects_empty():
    with pytest.raises(RegressionError):
        Regressor(np.zeros((0, 1)))


def test_conditional_expectation_of_square(ens):
    i = 25
    target = ens.B[:, -1, 0] ** 2
    fit, diag = conditional_expectation(ens, i, target)
    want = ens.B[:, i, 0] ** 2 + (1 - ens.t[i])
    assert np.sqrt(np.mean((fit - want) ** 2)) < 0.05
    assert diag.rows == ens.N


@pytest.mark.parametrize("kind", ["constant", "brownian", "square"])
def test_closed_pair_is_a_martingale(ens, kind):
    eta = Terminal(kind, value=0.7, scale=1.3, shift=-0.2)
    pair = martingale_pair(eta, ens)
    dxi = np.diff(pair.xi[:, :, 0], axis=1)
    zdb = pair.zeta[:, :, 0, 0] * ens.dB[:, :, 0]
    # exact for constant/brownian, Ito correction of order dt for the square
    tol = 1e-12 if kind != "square" else 1.3 * ens.dt * 6
    assert np.max(np.abs(np.mean(dxi - zdb, axis=0))) <= tol
    np.testing.assert_allclose(pair.xi[:, -1, 0], eta.apply(ens.B[:, -1, 0]))


def test_regression_pair_matches_closed_form(ens):
    eta = Terminal("square", scale=1.0)
    closed = martingale_pair(eta, ens, "closed")
    reg = martingale_pair(eta, ens, "regression", 3)
    se = np.std(closed.xi[:, -1]) / np.sqrt(ens.N)
    assert abs(reg.xi[0, 0, 0] - closed.xi[0, 0, 0]) < 3 * se
    # a cubic fit carries about four coefficients' worth of sampling noise
    rms = np.sqrt(np.mean((closed.xi - reg.xi) ** 2, axis=0))
    assert rms.mean() < 2 * np.sqrt(4) * se


def test_closed_pair_unavailable():
    ens = simulate(GridConfig(K=10, N=50, exit_level=0.5))
    with pytest.raises(ValueError):
        martingale_pair(Terminal("square"), ens, "closed")
    with pytest.raises(ValueError):
        martingale_pair(Terminal("constant"), ens, "magic")


def test_terminal_validation():
    with pytest.raises(ValueError):
        Terminal("cubic")
    with pytest.raises(ValueError):
        Terminal("custom")
    assert Terminal("clamped", lo=-1, hi=1).apply(np.array([-3.0, 0.5])).tolist() == [-1.0, 0.5]


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 1.0))
def test_smoothing_constant_is_exact(c, eps):
    ens = simulate(GridConfig(K=40, N=200, seed=1))
    out = exp_smooth(np.full((200, 41), c), ens, eps)
    assert np.max(np.abs(out - c)) <= 1e-12 * (1 + abs(c))


def test_pathwise_smoothing_of_linear_function():
    ens = simulate(GridConfig(K=200, N=2))
    U = np.tile(ens.t, (2, 1))
    out, q_eps = smooth_pathwise(U, ens, 0.1)
    # kernel mean of r on [t, T] with U_r = U_T past T
    t = ens.t[100]
    want = t + 0.1 * (1 - np.exp(-(1 - t) / 0.1))
    assert out[0, 100] == pytest.approx(want, abs=1e-12)
    np.testing.assert_allclose(out[:, :20], out[:, 20:21].repeat(20, axis=1))
    np.testing.assert_allclose(q_eps, 0.1)


def test_smoothing_validation(ens):
    U = ens.B[:, :, 0]
    with pytest.raises(ValueError):
        smooth_pathwise(U, ens, 0.0)
    with pytest.raises(ValueError):
        smooth_pathwise(U, ens, 2.0)
    with pytest.warns(UserWarning):
        smooth_pathwise(U, ens, 0.5 * ens.dt)


def test_smoothing_bound_holds_for_brownian_motion(ens):
    out = smoothing_bound_check(ens.B[:, :, 0], ens, 0.1)
    assert out["passed"]
    assert isinstance(out["tolerance"], float)


def test_ensemble_rows_header(ens):
    header, rows = ensemble_rows(ens, max_paths=2)
    assert header == ["path", "step", "B1", "A", "Q", "V"]
    assert len(rows) == 2 * (ens.K + 1)
