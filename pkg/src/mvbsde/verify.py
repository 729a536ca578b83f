"""Empirical checks of the solution concept on a path ensemble.

Every integral is a left-endpoint sum on the grid and every expectation an
ensemble mean.  Checks return plain dictionaries that serialize to JSON.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .driving import (
    GridConfig,
    MartingalePair,
    PathEnsemble,
    compute_weights,
    conditional_expectation,
    exp_smooth,
    simulate,
    smooth_pathwise,
)
from .engine import (
    MultivaluedSolution,
    Problem,
    SolverOptions,
    obstacle_envelope,
    obstacle_value,
    refine_epsilon,
    solve_penalized,
)
from .generators import GeneratorSpec, combined_H

SCHEMA_VERSION = 1

# Slope of the discretization term of the def1 tolerance, calibrated once on
# the unobstructed linear problem (K in {50, 100, 200}; constant, Brownian
# and squared terminals; all q, delta and test martingales).  The largest
# residual seen there was 0.7 dt beyond three standard errors.
C1_DEF1 = 1.5
SE_MULT = 3.0


def n_const(p: float) -> float:
    """``min(p - 1, 1)``."""
    return min(p - 1.0, 1.0)


def delta_q(delta: float, q: float) -> float:
    """``delta`` if ``1 <= q < 2`` and 0 otherwise."""
    return float(delta) if 1.0 <= q < 2.0 else 0.0


def q_values(p: float) -> List[float]:
    """The exponents ``{2, min(p, 2)}`` in a fixed order."""
    return [2.0] if p >= 2 else [2.0, float(p)]


# ---------------------------------------------------------------- test martingales


@dataclass
class TestMartingale:
    """Grid semimartingale ``M_i = M_{i+1} + N_i dQ_i - R_i dB_i``.

    Shapes: ``M`` ``(N, K+1, m)``, ``N`` ``(N, K, m)``, ``R`` ``(N, K, m, k)``.
    ``envelope_value`` makes the checks evaluate the obstacle at ``M`` with
    the same Moreau envelope used for the solution (only for ``M = Y``).
    """

    __test__ = False  # not a pytest class

    M: np.ndarray
    N: np.ndarray
    R: np.ndarray
    tag: str
    envelope_value: bool = False

    def identity_residual(self, ens: PathEnsemble) -> np.ndarray:
        """``M_i - M_{i+1} - N_i dQ_i + R_i dB_i`` on active steps."""
        rdb = np.einsum("nimk,nik->nim", self.R, ens.dB)
        res = self.M[:, :-1] - self.M[:, 1:] - self.N * ens.dQ[:, :, None] + rdb
        return np.where(ens.active[:, :, None], res, 0.0)


def _drift_from_identity(M, R, ens):
    rdb = np.einsum("nimk,nik->nim", R, ens.dB)
    dq = np.where(ens.dQ > 0, ens.dQ, 1.0)[:, :, None]
    N = (M[:, :-1] - M[:, 1:] + rdb) / dq
    return np.where(ens.active[:, :, None], N, 0.0)


def constant_martingale(gamma, ens: PathEnsemble, m: int = 1) -> TestMartingale:
    g = np.broadcast_to(np.asarray(gamma, dtype=float).reshape(-1), (m,))
    M = np.broadcast_to(g, (ens.N, ens.K + 1, m)).copy()
    return TestMartingale(M, np.zeros((ens.N, ens.K, m)), np.zeros((ens.N, ens.K, m, ens.cfg.k)),
                          f"constant({', '.join(f'{v:g}' for v in g)})")


def pair_martingale(pair: MartingalePair, tag: str = "pair") -> TestMartingale:
    N, K1, m = pair.xi.shape
    return TestMartingale(pair.xi.copy(), np.zeros((N, K1 - 1, m)), pair.zeta.copy(), tag)


def solution_martingale(sol: MultivaluedSolution, ens: PathEnsemble) -> TestMartingale:
    """``M = Y``, ``R = Z`` and the drift closing the grid identity."""
    N = _drift_from_identity(sol.Y, sol.Z, ens)
    return TestMartingale(sol.Y.copy(), N, sol.Z.copy(), "solution", envelope_value=True)


def smoothed_martingale(U: np.ndarray, ens: PathEnsemble, eps: float, degree: int = 3,
                        tag: Optional[str] = None) -> TestMartingale:
    """Exponential smoothing ``M`` of ``U`` with ``N = 1[t >= eps](U - M)/Q_eps``.

    ``R_i`` is the regression estimate of ``E_i[(M_{i+1} - E_i M_{i+1}) dB_i] / dt``.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 2:
        U = U[:, :, None]
    n, K1, m = U.shape
    M = exp_smooth(U, ens, eps, degree)
    _, q_eps = smooth_pathwise(U[:, :, 0], ens, eps)
    after = (ens.t[:-1] >= eps - 1e-12)[None, :, None]
    Ndrift = np.where(after, (U[:, :-1] - M[:, :-1]) / q_eps[:, None, None], 0.0)
    Ndrift = np.where(ens.active[:, :, None], Ndrift, 0.0)
    k = ens.cfg.k
    R = np.zeros((n, K1 - 1, m, k))
    for i in range(K1 - 1):
        alive = ens.active[:, i]
        if not alive.any():
            continue
        mean, _ = conditional_expectation(ens, i, M[:, i + 1], degree, alive)
        prod = (M[:, i + 1] - mean)[:, :, None] * ens.dB[:, i, None, :]
        fit, _ = conditional_expectation(ens, i, prod.reshape(n, -1), degree, alive)
        R[:, i] = np.where(alive[:, None, None], fit.reshape(n, m, k) / ens.dt, 0.0)
    return TestMartingale(M, Ndrift, R, tag or f"smoothed(eps={eps:g})")


def midpoint_martingale(sol: MultivaluedSolution, ens: PathEnsemble, anchor, eps: float,
                        degree: int = 3) -> TestMartingale:
    """Smoothing of the midpoint of the feasible solution and a constant ``anchor``."""
    U = 0.5 * (sol.Y_proj + np.asarray(anchor, dtype=float))
    return smoothed_martingale(U, ens, eps, degree, tag=f"smoothed-midpoint(eps={eps:g})")


# ---------------------------------------------------------------- def1


@dataclass
class VariationalReport:
    """Outcome of :func:`check_def1`; ``rows`` hold one entry per tuple."""

    rows: List[dict]
    skipped: List[dict]
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r["passed"] for r in self.rows)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "passed": self.passed,
                "rows": self.rows, "skipped": self.skipped, "meta": self.meta}


@dataclass
class _Def1Inputs:
    Y: np.ndarray
    Z: np.ndarray
    H: np.ndarray
    psi_Y: np.ndarray
    dQ: np.ndarray
    dB: np.ndarray
    dt: float


def _def1_inputs(sol, ens, problem, psi_eps):
    gen = problem.gen
    N, K = ens.N, ens.K
    H = np.zeros((N, K, gen.m))
    for i in range(K):
        alive = ens.active[:, i]
        H[:, i] = combined_H(gen, ens.alpha[:, i], alive, ens.t[i], sol.Y[:, i], sol.Z[:, i], ens.state(i))
    psi_Y = obstacle_envelope(problem.phi, problem.psi, sol.Y[:, :-1], ens.alpha, psi_eps) * ens.active
    dQ = ens.dQ * ens.active
    return _Def1Inputs(sol.Y, sol.Z, H, psi_Y, dQ, ens.dB, ens.dt)


def def1_residual_paths(inp: _Def1Inputs, tm: TestMartingale, psi_M: np.ndarray, q: float,
                        dq_: float, a: int, b: int) -> np.ndarray:
    """Per-path ``LHS - RHS`` of the Gamma inequality on nodes ``[a, b]``."""
    s = slice(a, b)
    diff = tm.M - inp.Y
    gam2 = np.sum(diff ** 2, axis=-1) + dq_
    gam = np.sqrt(gam2)
    with np.errstate(divide="ignore", invalid="ignore"):
        gq2 = np.where(gam > 0, gam ** (q - 2), 0.0 if q < 2 else 1.0)
    rz = np.sum((tm.R - inp.Z) ** 2, axis=(-2, -1))
    lhs = (gam[:, a] ** q
           + 0.5 * q * (q - 1) * np.sum(gq2[:, s] * rz[:, s] * inp.dt, axis=1)
           + q * np.sum(gq2[:, s] * inp.psi_Y[:, s] * inp.dQ[:, s], axis=1))
    inner_drift = np.sum(diff[:, :-1] * (tm.N - inp.H), axis=-1)
    rdb = np.einsum("nimk,nik->nim", tm.R - inp.Z, inp.dB)
    inner_noise = np.sum(diff[:, :-1] * rdb, axis=-1)
    rhs = (gam[:, b] ** q
           + q * np.sum(gq2[:, s] * psi_M[:, s] * inp.dQ[:, s], axis=1)
           + q * np.sum(gq2[:, s] * inner_drift[:, s] * inp.dQ[:, s], axis=1)
           - q * np.sum(gq2[:, s] * inner_noise[:, s], axis=1))
    return lhs - rhs


def energy_residual_paths(inp: _Def1Inputs, tm: TestMartingale, psi_M: np.ndarray,
                          a: int, b: int) -> np.ndarray:
    """Quadratic (``q = 2``) form written out term by term."""
    s = slice(a, b)
    d = tm.M - inp.Y
    lhs = (np.sum(d[:, a] ** 2, axis=-1)
           + np.sum(np.sum((tm.R - inp.Z)[:, s] ** 2, axis=(-2, -1)) * inp.dt, axis=1)
           + 2.0 * np.sum(inp.psi_Y[:, s] * inp.dQ[:, s], axis=1))
    noise = np.einsum("nim,nimk,nik->ni", d[:, s], (tm.R - inp.Z)[:, s], inp.dB[:, s])
    rhs = (np.sum(d[:, b] ** 2, axis=-1)
           + 2.0 * np.sum(psi_M[:, s] * inp.dQ[:, s], axis=1)
           + 2.0 * np.einsum("nim,nim,ni->n", d[:, s], (tm.N - inp.H)[:, s], inp.dQ[:, s])
           - 2.0 * np.sum(noise, axis=1))
    return lhs - rhs


def weighted_residual_paths(inp: _Def1Inputs, tm: TestMartingale, psi_M: np.ndarray, q: float,
                            dq_: float, L: np.ndarray, a: int, b: int) -> np.ndarray:
    """Residual of the form weighted by ``e^{qL}`` for a grid process ``L`` ``(N, K+1)``."""
    s = slice(a, b)
    diff = tm.M - inp.Y
    gam = np.sqrt(np.sum(diff ** 2, axis=-1) + dq_)
    w = np.exp(q * L)
    with np.errstate(divide="ignore", invalid="ignore"):
        gq2 = np.where(gam > 0, gam ** (q - 2), 0.0 if q < 2 else 1.0)
    dL = np.diff(L, axis=1)
    rz = np.sum((tm.R - inp.Z) ** 2, axis=(-2, -1))
    ws = w[:, s]
    g = gq2[:, s]
    lhs = (w[:, a] * gam[:, a] ** q
           + q * np.sum(ws * gam[:, s] ** q * dL[:, s], axis=1)
           + 0.5 * q * n_const(q) * np.sum(ws * g * rz[:, s] * inp.dt, axis=1)
           + q * np.sum(ws * g * inp.psi_Y[:, s] * inp.dQ[:, s], axis=1))
    inner_drift = np.sum(diff[:, :-1] * (tm.N - inp.H), axis=-1)
    inner_noise = np.sum(diff[:, :-1] * np.einsum("nimk,nik->nim", tm.R - inp.Z, inp.dB), axis=-1)
    rhs = (w[:, b] * gam[:, b] ** q
           + q * np.sum(ws * g * psi_M[:, s] * inp.dQ[:, s], axis=1)
           + q * np.sum(ws * g * inner_drift[:, s] * inp.dQ[:, s], axis=1)
           - q * np.sum(ws * g * inner_noise[:, s], axis=1))
    return lhs - rhs


def _psi_of_martingale(tm, problem, ens, psi_eps):
    if tm.envelope_value:
        return obstacle_envelope(problem.phi, problem.psi, tm.M[:, :-1], ens.alpha, psi_eps) * ens.active
    val = obstacle_value(problem.phi, problem.psi, tm.M[:, :-1], ens.alpha)
    if not np.all(np.isfinite(val[ens.active])):
        return None
    return np.where(ens.active, val, 0.0)


def check_def1(sol: MultivaluedSolution, ens: PathEnsemble, problem: Problem,
               martingales: Sequence[TestMartingale], deltas: Sequence[float] = (0.01, 0.5),
               windows: Optional[Sequence[tuple]] = None, p: Optional[float] = None,
               psi_eps: Optional[float] = None, c1: float = C1_DEF1) -> VariationalReport:
    """Path-averaged Gamma inequality for every ``(q, delta, M, window)``.

    A tuple passes when the mean residual ``LHS - RHS`` is at most
    ``c1 dt + 3 SE``, ``SE`` being the standard error of the per-path
    residuals.  The obstacle at the solution is the Moreau envelope at
    ``psi_eps`` (default: the smallest ``eps`` of the schedule); at the test
    martingale it is evaluated exactly, and a martingale leaving the domain
    is skipped.
    """
    p = problem.p if p is None else float(p)
    if not p > 1:
        raise ValueError("p must exceed 1")
    psi_eps = min(sol.eps_schedule) if psi_eps is None else float(psi_eps)
    windows = list(windows) if windows else [(0, ens.K)]
    inp = _def1_inputs(sol, ens, problem, psi_eps)
    rows, skipped = [], []
    for tm in martingales:
        psi_M = _psi_of_martingale(tm, problem, ens, psi_eps)
        if psi_M is None:
            skipped.append({"martingale": tm.tag, "note": "obstacle infinite at the test martingale"})
            continue
        for q in q_values(p):
            for delta in deltas:
                dq_ = delta_q(delta, q)
                for a, b in windows:
                    res = def1_residual_paths(inp, tm, psi_M, q, dq_, a, b)
                    mean = float(res.mean())
                    se = float(res.std() / np.sqrt(ens.N))
                    tol = c1 * ens.dt + SE_MULT * se
                    rows.append({"martingale": tm.tag, "q": q, "delta": float(delta), "delta_q": dq_,
                                 "window": [int(a), int(b)], "residual": mean, "se": se,
                                 "tolerance": tol, "passed": bool(mean <= tol)})
    meta = {"N": ens.N, "K": ens.K, "dt": ens.dt, "p": p, "psi_eps": psi_eps, "c1": c1,
            "se_mult": SE_MULT}
    return VariationalReport(rows, skipped, meta)


# ---------------------------------------------------------------- terminal


def check_terminal(sol, ens: PathEnsemble, pair: MartingalePair, p: float = 2.0,
                   tol: float = 1e-12) -> dict:
    """Weighted terminal gap and the gap beyond the horizon.

    ``final_gap`` is ``E e^{pV_tau}|Y_tau - xi_tau|^p`` at each path's last
    node; ``beyond_gap`` is the largest ``|Y - xi| + |Z - zeta|`` after the
    horizon (zero under the pinning contract).
    """
    V, _ = ens.weights()
    idx = np.arange(ens.N)
    last = ens.exit_index
    gap = np.linalg.norm(sol.Y[idx, last] - pair.xi[idx, last], axis=-1)
    final_gap = float(np.mean(np.exp(p * V[idx, last]) * gap ** p))
    after = ~ens.in_horizon
    dy = np.linalg.norm(sol.Y - pair.xi, axis=-1)
    beyond = float(dy[after].max()) if after.any() else 0.0
    step_after = ~ens.active
    if step_after.any():
        dz = np.sqrt(np.sum((sol.Z - pair.zeta) ** 2, axis=(-2, -1)))
        beyond = max(beyond, float(dz[step_after].max()))
    return {"schema_version": SCHEMA_VERSION, "final_gap": final_gap, "beyond_gap": beyond,
            "tolerance": tol, "passed": bool(final_gap <= tol and beyond <= tol)}


# ---------------------------------------------------------------- a-priori bound


def _pos_power(x, e):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, np.abs(x) ** e, 0.0)


def check_apriori(sol, ens: PathEnsemble, problem: Problem, p: Optional[float] = None,
                  lam: Optional[float] = None, psi_eps: Optional[float] = None) -> dict:
    """Left-hand terms of the a-priori bound, the data bracket and their ratio.

    The constant of the bound is not known, so only finiteness is judged
    here; stability of the ratio is the job of :func:`apriori_stability`.
    """
    p = problem.p if p is None else float(p)
    lam = problem.lam if lam is None else float(lam)
    ens = compute_weights(ens, problem.gen, p, lam)
    V = ens.V
    psi_eps = min(sol.eps_schedule) if psi_eps is None else float(psi_eps)
    act = ens.active
    ynorm = np.linalg.norm(sol.Y, axis=-1)
    z2 = np.sum(sol.Z ** 2, axis=(-2, -1)) * act
    psi_Y = obstacle_envelope(problem.phi, problem.psi, sol.Y[:, :-1], ens.alpha, psi_eps) * act
    dQ = ens.dQ * act
    terms = {
        "sup_Y": float(np.mean(np.max(np.where(ens.in_horizon, np.exp(p * V) * ynorm ** p, 0.0), axis=1))),
        "Z_energy": float(np.mean(np.sum(np.exp(2 * V[:, :-1]) * z2 * ens.dt, axis=1) ** (p / 2))),
        "obstacle_energy": float(np.mean(np.sum(np.exp(2 * V[:, :-1]) * psi_Y * dQ, axis=1) ** (p / 2))),
    }
    for q in q_values(p):
        w = np.exp(q * V[:, :-1]) * _pos_power(ynorm[:, :-1], q - 2)
        terms[f"Z_mixed_q{q:g}"] = float(np.mean(np.sum(w * z2 * ens.dt, axis=1) ** (p / q)))
        terms[f"obstacle_mixed_q{q:g}"] = float(np.mean(np.sum(w * psi_Y * dQ, axis=1) ** (p / q)))
    gen = problem.gen
    h0 = np.zeros((ens.N, ens.K))
    zy = np.zeros((ens.N, gen.m))
    zz = np.zeros((ens.N, gen.m, gen.k))
    for i in range(ens.K):
        h = combined_H(gen, ens.alpha[:, i], act[:, i], ens.t[i], zy, zz, ens.state(i))
        h0[:, i] = np.linalg.norm(h, axis=-1)
    idx = np.arange(ens.N)
    eta = np.linalg.norm(sol.Y[idx, ens.exit_index], axis=-1)
    rhs = float(np.mean(np.exp(p * V[idx, ens.exit_index]) * eta ** p
                        + np.sum(np.exp(V[:, :-1]) * h0 * dQ, axis=1) ** p))
    lhs = float(sum(terms.values()))
    finite = all(np.isfinite(v) for v in terms.values())
    if rhs == 0.0:
        ratio = 0.0 if lhs == 0.0 else float("inf")
    else:
        ratio = lhs / rhs
    return {"schema_version": SCHEMA_VERSION, "p": p, "lambda": lam, "terms": terms, "lhs": lhs,
            "rhs": rhs, "ratio": ratio, "finite": bool(finite), "passed": bool(finite)}


def _solve(ens, problem, schedule, opts):
    """Refinement solve, or one penalized solve when there is no obstacle."""
    opts = opts or SolverOptions()
    if ens.V is None:
        ens = compute_weights(ens, problem.gen, problem.p, problem.lam)
    if problem.phi.kind == "zero" and problem.psi.kind == "zero" or not schedule:
        ps = solve_penalized(ens, problem, 1.0 if not schedule else min(schedule), opts)
        return ens, _wrap(ps)
    return ens, refine_epsilon(ens, problem, schedule, float("inf"), opts)


def _wrap(ps):
    N, K1, m = ps.Y.shape
    return MultivaluedSolution(ps.Y, ps.Z, np.zeros((N, K1, m)), ps.Y.copy(), [ps.eps], [], [],
                               [float(ps.y0[0])], ps.y0_se, True, ps)


def apriori_stability(problem: Problem, grid: GridConfig, schedule=None,
                      opts: Optional[SolverOptions] = None, factor: float = 2.0) -> dict:
    """Ratio of :func:`check_apriori` at the base grid, doubled ``K`` and doubled ``N``."""
    runs = {}
    for name, cfg in (("base", grid), ("refined_K", dataclasses.replace(grid, K=2 * grid.K)),
                      ("doubled_N", dataclasses.replace(grid, N=2 * grid.N))):
        ens, sol = _solve(simulate(cfg), problem, schedule, opts)
        runs[name] = check_apriori(sol, ens, problem)
    ratios = [r["ratio"] for r in runs.values()]
    finite = all(r["finite"] for r in runs.values())
    if all(v == 0 for v in ratios):
        stable = True
    else:
        stable = min(ratios) > 0 and max(ratios) / min(ratios) <= factor
    return {"schema_version": SCHEMA_VERSION, "runs": runs, "ratios": ratios, "factor": factor,
            "passed": bool(finite and stable)}


# ---------------------------------------------------------------- continuity and uniqueness


def shifted_driver(gen: GeneratorSpec, h: float) -> GeneratorSpec:
    """``F + h`` with everything else unchanged."""
    F = gen.F

    def Fh(t, y, z, state=None):
        return F(t, y, z, state) + h

    sharp = gen.sharp

    def sh(r, t, state=None):
        f, g = sharp(r, t, state)
        return f + abs(h), g

    return dataclasses.replace(gen, F=Fh, sharp=None if sharp is None else sh, tag=f"{gen.tag}+{h:g}")


def weighted_distance(Y1, Y2, ens: PathEnsemble, alpha: float, q: float) -> float:
    """``E max_i e^{alpha q V_i}|Y1_i - Y2_i|^{alpha q}`` over nodes in the horizon."""
    V, _ = ens.weights()
    d = np.linalg.norm(Y1 - Y2, axis=-1)
    w = np.exp(alpha * q * V) * d ** (alpha * q)
    return float(np.mean(np.max(np.where(ens.in_horizon, w, 0.0), axis=1)))


def check_continuity(problem: Problem, grid: GridConfig, hs: Sequence[float], schedule=None,
                     opts: Optional[SolverOptions] = None, alpha: float = 0.5, q: float = 2.0,
                     kind: str = "terminal", spread_limit: float = 3.0) -> dict:
    """Distance between the base solution and perturbed ones on one ensemble.

    ``kind='terminal'`` shifts ``eta`` by ``h``; ``kind='driver'`` adds ``h``
    to ``F``.  Passes when ``D(h)`` strictly decreases along ``hs`` and, for
    terminal shifts, ``max/min`` of ``D(h)/h^{alpha q}`` stays below
    ``spread_limit``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if kind not in ("terminal", "driver"):
        raise ValueError("kind must be 'terminal' or 'driver'")
    ens0, base = _solve(simulate(grid), problem, schedule, opts)
    rows = []
    for h in hs:
        if kind == "terminal":
            pert = problem.shifted(h)
        else:
            pert = dataclasses.replace(problem, gen=shifted_driver(problem.gen, h))
        _, sol = _solve(ens0, pert, schedule, opts)
        D = weighted_distance(base.Y, sol.Y, ens0, alpha, q)
        ratio = D / h ** (alpha * q) if h > 0 else 0.0
        rows.append({"h": float(h), "distance": D, "ratio": ratio})
    Ds = [r["distance"] for r in rows]
    decreasing = all(b < a for a, b in zip(Ds, Ds[1:]))
    ratios = [r["ratio"] for r in rows if r["h"] > 0]
    spread = max(ratios) / min(ratios) if ratios and min(ratios) > 0 else float("inf")
    ok = decreasing and (kind == "driver" or spread < spread_limit)
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "alpha": alpha, "q": q, "rows": rows,
            "decreasing": bool(decreasing), "spread": spread, "spread_limit": spread_limit,
            "passed": bool(ok)}


def check_uniqueness(problem: Problem, grid: GridConfig, seeds: Sequence[int], schedule=None,
                     opts: Optional[SolverOptions] = None, reference: Optional[float] = None,
                     ref_tol: Optional[float] = None) -> dict:
    """Agreement of ``Y_0`` between independent ensembles within 3 combined SE.

    An absolute floor of ``1e-12 (1 + |Y_0|)`` absorbs round-off when both
    estimates are deterministic.  With ``reference`` each estimate must also
    be within ``ref_tol`` of it.
    """
    if len(seeds) != 2 or seeds[0] == seeds[1]:
        raise ValueError("need two distinct seeds")
    est = []
    for s in seeds:
        _, sol = _solve(simulate(dataclasses.replace(grid, seed=int(s))), problem, schedule, opts)
        est.append((float(sol.y0[0]), float(sol.y0_se)))
    (m1, s1), (m2, s2) = est
    bound = SE_MULT * np.hypot(s1, s2) + 1e-12 * (1 + abs(m1))
    ok = abs(m1 - m2) <= bound
    out = {"schema_version": SCHEMA_VERSION, "seeds": [int(s) for s in seeds],
           "y0": [m1, m2], "se": [s1, s2], "difference": abs(m1 - m2), "bound": float(bound)}
    if reference is not None:
        tol = ref_tol if ref_tol is not None else bound
        near = all(abs(m - reference) <= tol for m in (m1, m2))
        out.update(reference=reference, reference_tol=tol, near_reference=bool(near))
        ok = ok and near
    out["passed"] = bool(ok)
    return out


# ---------------------------------------------------------------- Ito residual


def _ito_parts(Y, Z, p, delta):
    y2 = np.sum(Y ** 2, axis=-1)
    base = y2 + delta
    f = base ** (p / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(base > 0, base ** ((p - 2) / 2), 0.0)
        c4 = np.where(base[:, :-1] > 0, base[:, :-1] ** ((p - 4) / 2), 0.0)
    ry = np.einsum("nimk,nim->nik", Z, Y[:, :-1])
    ry2 = np.sum(ry ** 2, axis=-1)
    z2 = np.sum(Z ** 2, axis=(-2, -1))
    return f, g, c4, ry2, z2, y2[:, :-1]


def ito_residual(Y: np.ndarray, Z: np.ndarray, ens: PathEnsemble, p: float, delta: float,
                 one_sided: bool = False) -> np.ndarray:
    """Per-path ``LHS - RHS`` of the Ito identity for ``(|Y|^2 + delta)^{p/2}`` on the whole grid.

    The bounded-variation part is read off the grid as
    ``Y_i - Y_{i+1} + Z_i dB_i``, so the right-hand side only involves
    ``<Y_i, Y_{i+1} - Y_i>``.  With ``one_sided`` the quadratic-variation
    integrand is replaced by its lower bound ``(n_p|Y|^2 + delta)|Z|^2``.
    """
    if delta == 0 and p < 2 and np.any(np.linalg.norm(Y, axis=-1) == 0):
        raise ValueError("delta = 0 with p < 2 needs Y away from zero")
    f, g, c4, ry2, z2, y2 = _ito_parts(Y, Z, p, delta)
    if one_sided:
        inner = (n_const(p) * y2 + delta) * z2
    else:
        inner = (p - 1) * ry2 + (z2 * y2 - ry2) + delta * z2
    act = ens.active
    qv = np.sum(0.5 * p * c4 * inner * ens.dt * act, axis=1)
    dY = np.diff(Y, axis=1)
    drift = p * np.sum(g[:, :-1] * np.sum(Y[:, :-1] * dY, axis=-1) * act, axis=1)
    idx = np.arange(Y.shape[0])
    return f[:, 0] + qv - f[idx, ens.exit_index] + drift


def ito_report(Y, Z, ens, p: float, delta: float) -> dict:
    r3 = ito_residual(Y, Z, ens, p, delta)
    r4 = ito_residual(Y, Z, ens, p, delta, one_sided=True)
    n = np.sqrt(len(r3))
    m3, m4 = float(r3.mean()), float(r4.mean())
    se3 = float(r3.std() / n)
    return {"p": p, "delta": delta, "K": ens.K, "identity_residual": m3, "identity_se": se3,
            "one_sided_residual": m4, "one_sided_ok": bool(m4 <= abs(m3) + SE_MULT * se3)}


# ---------------------------------------------------------------- output


def write_report_json(report, path, config_text: str = ""):
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    data = dict(data, config=config_text)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def write_def1_csv(report: VariationalReport, path, comments=()):
    cols = ["martingale", "q", "delta", "delta_q", "window", "residual", "se", "tolerance", "passed"]
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.rows:
            w.writerow([r["martingale"], repr(r["q"]), repr(r["delta"]), repr(r["delta_q"]),
                        f"{r['window'][0]}-{r['window'][1]}", repr(r["residual"]), repr(r["se"]),
                        repr(r["tolerance"]), int(r["passed"])])
