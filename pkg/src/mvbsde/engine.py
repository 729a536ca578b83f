"""Backward Euler solver for the penalized equation and the epsilon loop.

Sign convention for the reflection term: the reported ``K`` is the
cumulative upward push, ``dK = -dY - H dQ + Z dB``, so a lower obstacle
produces a nondecreasing ``K``.  Internally the subdifferential identity
uses ``-dK``, which lies in ``dQ`` times the subdifferential of the obstacle.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import convex as cv
from .driving import (
    PathEnsemble,
    RegressionDiagnostics,
    Terminal,
    compute_weights,
    conditional_expectation,
)
from .generators import (
    GeneratorSpec,
    MollifierConfig,
    combined_H,
    mollified,
    per_path,
    scaled,
)


class StepConstraintError(ValueError):
    """Explicit penalty step too large for the penalty stiffness."""

    def __init__(self, msg: str, min_steps: int):
        super().__init__(msg)
        self.min_steps = min_steps


@dataclass(frozen=True)
class Problem:
    """Data of a multivalued BSDE: drivers, obstacles and terminal value."""

    gen: GeneratorSpec
    phi: cv.ConvexSpec
    psi: cv.ConvexSpec
    eta: Terminal
    p: float = 2.0
    lam: float = 0.5
    eta_values: Optional[np.ndarray] = field(default=None, compare=False)

    def terminal(self, ens: PathEnsemble) -> np.ndarray:
        if self.eta_values is not None:
            return np.asarray(self.eta_values, dtype=float).reshape(ens.N, self.gen.m)
        return self.eta.evaluate(ens, self.gen.m)

    def shifted(self, h: float) -> "Problem":
        """Same problem with ``eta + h`` (used by continuity studies)."""
        fn = self.eta.apply
        eta = Terminal("custom", fn=lambda b: fn(b) + h)
        base = None if self.eta_values is None else self.eta_values + h
        return dataclasses.replace(self, eta=eta, eta_values=base)


@dataclass(frozen=True)
class SolverOptions:
    """Numerical choices of the backward solver.

    Attributes
    ----------
    penalty : str
        ``explicit`` (penalty gradient at the conditional mean, requires
        ``dQ <= eps / 2``) or ``implicit`` (closed-form resolvent step).
    degree : int
        Total polynomial degree of the regression basis.
    mollify : str
        ``auto`` (only drivers not Lipschitz in ``y``), ``always`` or
        ``never``.
    moll_nodes : int
        Quadrature nodes of the mollifier.
    moll_eps, gate_eps : float, optional
        Independent mollifier radius and clock-gate parameter; ``None`` ties
        them to the penalty parameter.
    """

    penalty: str = "explicit"
    degree: int = 3
    mollify: str = "auto"
    moll_nodes: int = 48
    moll_eps: Optional[float] = None
    gate_eps: Optional[float] = None

    def __post_init__(self):
        if self.penalty not in ("explicit", "implicit"):
            raise ValueError("penalty must be 'explicit' or 'implicit'")
        if self.mollify not in ("auto", "always", "never"):
            raise ValueError("mollify must be 'auto', 'always' or 'never'")


@dataclass
class PenalizedSolution:
    """Grid solution of the penalized equation at one ``eps``.

    ``Y`` is ``(N, K+1, m)``, ``Z`` is ``(N, K, m, k)``; ``U1`` and ``U2``
    are the Yosida gradients of the two obstacles at ``Y``.
    """

    eps: float
    Y: np.ndarray
    Z: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    y0_se: float
    diagnostics: List[Optional[RegressionDiagnostics]]
    step_ok: bool = True

    @property
    def y0(self) -> np.ndarray:
        return self.Y[:, 0].mean(axis=0)


@dataclass
class MultivaluedSolution:
    """Outcome of the epsilon refinement.

    ``K`` is the cumulative upward push (``K_0 = 0``), ``Y_proj`` the
    resolvent of the combined obstacle at the final ``eps`` (inside the
    effective domain).
    """

    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    Y_proj: np.ndarray
    eps_schedule: List[float]
    cauchy_residuals: List[float]
    penalty_energy: List[float]
    y0_history: List[float]
    y0_se: float
    converged: bool
    final: PenalizedSolution

    @property
    def y0(self) -> np.ndarray:
        return self.Y[:, 0].mean(axis=0)

    @property
    def eps(self) -> float:
        return self.eps_schedule[-1]


# ---------------------------------------------------------------- helpers


def clock_gate(ens: PathEnsemble, i: int, eps: float) -> np.ndarray:
    """``1[A_i <= 1/eps]`` per path."""
    return (ens.A[:, i] <= 1.0 / eps).astype(float)


def penalty_gradient(phi, psi, y, alpha, eps) -> np.ndarray:
    """``alpha grad phi_eps(y) + (1 - alpha) grad psi_eps(y)``; ``y`` is ``(n, m)``."""
    a = np.asarray(alpha, dtype=float)[..., None]
    return a * cv.yosida_grad(phi, y, eps) + (1 - a) * cv.yosida_grad(psi, y, eps)


def obstacle_value(phi, psi, y, alpha) -> np.ndarray:
    """``alpha phi(y) + (1 - alpha) psi(y)`` with ``0 * inf = 0``."""
    a = np.asarray(alpha, dtype=float)
    vp = cv.value(phi, y)
    vs = cv.value(psi, y)
    with np.errstate(invalid="ignore"):
        return np.where(a > 0, a * vp, 0.0) + np.where(a < 1, (1 - a) * vs, 0.0)


def obstacle_envelope(phi, psi, y, alpha, eps) -> np.ndarray:
    """Moreau envelopes combined like :func:`obstacle_value`."""
    a = np.asarray(alpha, dtype=float)
    return a * cv.envelope(phi, y, eps) + (1 - a) * cv.envelope(psi, y, eps)


def _implicit_mode(phi, psi, alpha):
    if phi == psi:
        return "same"
    if psi.kind == "zero":
        return "phi"
    if phi.kind == "zero":
        return "psi"
    if np.all((alpha == 0) | (alpha == 1)):
        return "switch"
    return None


def implicit_penalty_step(phi, psi, x, alpha, dq, eps) -> np.ndarray:
    """Solve ``y + dq (alpha grad phi_eps + (1 - alpha) grad psi_eps)(y) = x``.

    ``dq`` may contain zeros (gated steps).  Supported when the obstacles
    coincide, when one of them is ``zero`` or when ``alpha`` is 0 or 1.
    """
    mode = _implicit_mode(phi, psi, alpha)
    if mode is None:
        raise ValueError("implicit penalty needs phi == psi, a zero obstacle, or alpha in {0, 1}")
    if mode == "same":
        return cv.penalty_resolvent(phi, x, eps, dq)
    if mode == "phi":
        return cv.penalty_resolvent(phi, x, eps, alpha * dq)
    if mode == "psi":
        return cv.penalty_resolvent(psi, x, eps, (1 - alpha) * dq)
    out = cv.penalty_resolvent(phi, x, eps, alpha * dq)
    return np.where((alpha == 0)[:, None], cv.penalty_resolvent(psi, x, eps, dq), out)


def combined_resolvent(phi, psi, y, alpha, eps) -> np.ndarray:
    """Resolvent of the combined obstacle, used to report a feasible ``Y``."""
    mode = _implicit_mode(phi, psi, alpha)
    a = np.asarray(alpha, dtype=float)
    if mode == "same":
        return cv.prox(phi, y, eps)
    if mode == "phi":
        return cv.prox(phi, y, eps * np.maximum(a, 1e-300))
    if mode == "psi":
        return cv.prox(psi, y, eps * np.maximum(1 - a, 1e-300))
    if mode == "switch":
        return np.where((a == 1)[:, None], cv.prox(phi, y, eps), cv.prox(psi, y, eps))
    # no closed form: compose the two resolvents (exact when they commute)
    return cv.prox(psi, cv.prox(phi, y, eps), eps)


def effective_generator(gen: GeneratorSpec, eps: float, opts: SolverOptions) -> GeneratorSpec:
    use = opts.mollify == "always" or (opts.mollify == "auto" and not gen.lipschitz_y)
    if not use:
        return gen
    radius = min(opts.moll_eps if opts.moll_eps is not None else eps, 1.0)
    return mollified(gen, MollifierConfig(radius, gen.m, opts.moll_nodes))


# ---------------------------------------------------------------- solver


def solve_penalized(ens: PathEnsemble, problem: Problem, eps: float,
                    opts: Optional[SolverOptions] = None) -> PenalizedSolution:
    """Backward Euler for the penalized equation at one ``eps``.

    ``Y_i = E_i[Y_{i+1}] + H_eps(t_i, ., Z_i) dQ_i - grad Psi_eps dQ_i`` with
    ``Z_i = E_i[(Y_{i+1} - E_i[Y_{i+1}]) dB_i] / dt``.  Driver and penalty are
    switched off after the horizon and while ``A_i > 1/eps``.  Beyond a path's
    horizon ``(Y, Z)`` stay at ``(eta, 0)``.
    """
    opts = opts or SolverOptions()
    if not eps > 0:
        raise ValueError("eps must be positive")
    gen, phi, psi = problem.gen, problem.phi, problem.psi
    N, K, k, m = ens.N, ens.K, ens.cfg.k, gen.m
    if phi.dim != m or psi.dim != m:
        raise ValueError("obstacle dimension must match the state dimension")
    gate_eps = opts.gate_eps if opts.gate_eps is not None else eps
    if opts.penalty == "explicit":
        dq_max = float(ens.dQ.max())
        if dq_max > eps / 2:
            k_min = int(np.ceil(K * dq_max / (eps / 2)))
            raise StepConstraintError(
                f"explicit penalty needs max dQ <= eps/2 = {eps / 2:g}, got {dq_max:g}; "
                f"use at least K = {k_min} steps or the implicit penalty", k_min)
    else:
        if _implicit_mode(phi, psi, ens.alpha) is None:
            raise ValueError("implicit penalty not available for this obstacle pair")
    heff = effective_generator(gen, eps, opts)

    Y = np.zeros((N, K + 1, m))
    Z = np.zeros((N, K, m, k))
    U1 = np.zeros((N, K + 1, m))
    U2 = np.zeros((N, K + 1, m))
    diags: List[Optional[RegressionDiagnostics]] = [None] * K
    Y[:, K] = problem.terminal(ens)
    # Y_0 is the path average of Y_K plus the per-step increments over the
    # fitted conditional mean (regressions keep sample means), which gives
    # its Monte Carlo standard error
    increments = np.zeros((N, m))
    for i in range(K - 1, -1, -1):
        alive = ens.active[:, i]
        nxt = Y[:, i + 1]
        if not alive.any():
            Y[:, i] = nxt
            continue
        mean, diag = conditional_expectation(ens, i, nxt, opts.degree, alive)
        diags[i] = diag
        centred = (nxt - mean)[:, :, None] * ens.dB[:, i, None, :]
        zfit, _ = conditional_expectation(ens, i, centred.reshape(N, -1), opts.degree, alive)
        z = np.where(alive[:, None, None], zfit.reshape(N, m, k) / ens.dt, 0.0)
        gate = clock_gate(ens, i, gate_eps) * alive
        alpha = ens.alpha[:, i]
        st = ens.state(i)
        h = combined_H(heff, alpha, alive, ens.t[i], mean, z, st) * gate[:, None]
        dq = ens.dQ[:, i]
        x = mean + h * dq[:, None]
        if opts.penalty == "explicit":
            y = x - penalty_gradient(phi, psi, mean, alpha, eps) * (gate * dq)[:, None]
        else:
            y = implicit_penalty_step(phi, psi, x, alpha, gate * dq, eps)
        Y[:, i] = np.where(alive[:, None], y, nxt)
        Z[:, i] = z
        increments += np.where(alive[:, None], y - mean, 0.0)
    y0_se = float(np.max(np.std(Y[:, K] + increments, axis=0)) / np.sqrt(N))
    for i in range(K + 1):
        U1[:, i] = cv.yosida_grad(phi, Y[:, i], eps)
        U2[:, i] = cv.yosida_grad(psi, Y[:, i], eps)
    return PenalizedSolution(eps, Y, Z, U1, U2, y0_se, diags)


def recover_K(sol: PenalizedSolution, ens: PathEnsemble, gen: GeneratorSpec,
              opts: Optional[SolverOptions] = None, gate_eps: Optional[float] = None) -> np.ndarray:
    """Cumulative upward push ``K`` with ``dK_i = -(Y_{i+1} - Y_i) - H_i dQ_i + Z_i dB_i``.

    ``H`` is the driver used by the solver (mollified when applicable),
    evaluated at ``(Y_i, Z_i)`` and gated like the solver.
    """
    opts = opts or SolverOptions()
    heff = effective_generator(gen, sol.eps, opts)
    ge = gate_eps if gate_eps is not None else (opts.gate_eps if opts.gate_eps is not None else sol.eps)
    N, K = ens.N, ens.K
    m = sol.Y.shape[2]
    dK = np.zeros((N, K, m))
    for i in range(K):
        alive = ens.active[:, i]
        gate = clock_gate(ens, i, ge) * alive
        h = combined_H(heff, ens.alpha[:, i], alive, ens.t[i], sol.Y[:, i], sol.Z[:, i], ens.state(i))
        zdb = np.einsum("nmk,nk->nm", sol.Z[:, i], ens.dB[:, i])
        step = -(sol.Y[:, i + 1] - sol.Y[:, i]) - h * (gate * ens.dQ[:, i])[:, None] + zdb
        dK[:, i] = np.where(alive[:, None], step, 0.0)
    Kc = np.zeros((N, K + 1, m))
    np.cumsum(dK, axis=1, out=Kc[:, 1:])
    return Kc


def penalty_push(sol: PenalizedSolution, ens: PathEnsemble, gate_eps: Optional[float] = None) -> np.ndarray:
    """``-grad Psi_eps(Y_i) dQ_i`` per step: the push implied by the penalty."""
    ge = gate_eps if gate_eps is not None else sol.eps
    a = ens.alpha[:, :, None]
    grad = a * sol.U1[:, :-1] + (1 - a) * sol.U2[:, :-1]
    gate = np.stack([clock_gate(ens, i, ge) for i in range(ens.K)], axis=1) * ens.active
    return -grad * (gate * ens.dQ)[:, :, None]


def cauchy_distance(a: PenalizedSolution, b: PenalizedSolution, ens: PathEnsemble) -> float:
    """Mean over paths of ``max_i e^{V+}|dY|`` plus the weighted L2 distance of ``Z``."""
    _, vp = ens.weights()
    w = np.exp(vp)
    dy = np.linalg.norm(a.Y - b.Y, axis=-1)
    sup_part = float(np.mean(np.max(w * dy, axis=1)))
    dz2 = np.sum((a.Z - b.Z) ** 2, axis=(-2, -1))
    l2_part = float(np.sqrt(np.mean(np.sum(w[:, :-1] ** 2 * dz2 * ens.dt, axis=1))))
    return sup_part + l2_part


def penalty_energy(sol: PenalizedSolution, ens: PathEnsemble) -> float:
    """``E sum e^{2V+} (alpha |U1|^2 + (1 - alpha) |U2|^2) dQ`` over active steps."""
    _, vp = ens.weights()
    a = ens.alpha
    u = a * np.sum(sol.U1[:, :-1] ** 2, axis=-1) + (1 - a) * np.sum(sol.U2[:, :-1] ** 2, axis=-1)
    return float(np.mean(np.sum(np.exp(2 * vp[:, :-1]) * u * ens.dQ * ens.active, axis=1)))


def refine_epsilon(ens: PathEnsemble, problem: Problem, schedule: Sequence[float], tol: float,
                   opts: Optional[SolverOptions] = None) -> MultivaluedSolution:
    """Solve along a decreasing ``eps`` schedule and stop-check the last step.

    ``cauchy_residuals[j]`` compares the solutions at ``schedule[j]`` and
    ``schedule[j + 1]``; ``converged`` is ``cauchy_residuals[-1] <= tol``.
    """
    schedule = [float(e) for e in schedule]
    if len(schedule) < 2:
        raise ValueError("schedule needs at least two entries")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly decreasing")
    opts = opts or SolverOptions()
    if ens.Vplus is None:
        ens = compute_weights(ens, problem.gen, problem.p, problem.lam)
    sols = [solve_penalized(ens, problem, e, opts) for e in schedule]
    residuals = [cauchy_distance(a, b, ens) for a, b in zip(sols, sols[1:])]
    energy = [penalty_energy(s, ens) for s in sols]
    final = sols[-1]
    Kc = recover_K(final, ens, problem.gen, opts)
    proj = np.stack([combined_resolvent(problem.phi, problem.psi, final.Y[:, i],
                                        ens.alpha[:, min(i, ens.K - 1)], final.eps)
                     for i in range(ens.K + 1)], axis=1)
    return MultivaluedSolution(
        Y=final.Y, Z=final.Z, K=Kc, Y_proj=proj, eps_schedule=schedule,
        cauchy_residuals=residuals, penalty_energy=energy,
        y0_history=[float(s.y0[0]) for s in sols], y0_se=final.y0_se,
        converged=bool(residuals[-1] <= tol), final=final,
    )


def solve_random_horizon(ens: PathEnsemble, problem: Problem, schedule: Sequence[float],
                         tol: float, opts: Optional[SolverOptions] = None) -> MultivaluedSolution:
    """:func:`refine_epsilon` on an ensemble with an exit-time horizon.

    Beyond each path's exit node the solution is pinned to ``(eta, 0)``.
    """
    if ens.cfg.exit_level is None:
        raise ValueError("ensemble has no random horizon; set exit_level")
    return refine_epsilon(ens, problem, schedule, tol, opts)


# ---------------------------------------------------------------- truncation


def truncation_level(ens: PathEnsemble, problem: Problem) -> np.ndarray:
    """Pathwise ``beta_t`` (``(N, K+1)``) gating the truncated drivers.

    ``beta_t = t + A_t + |mu_t| + |nu_t| + ell_t + V+_t + |F(t,0,0)| + |G(t,0)|``.
    """
    gen = problem.gen
    if ens.Vplus is None:
        ens = compute_weights(ens, gen, problem.p, problem.lam)
    N, K = ens.N, ens.K
    beta = np.zeros((N, K + 1))
    zeros_y = np.zeros((N, gen.m))
    zeros_z = np.zeros((N, gen.m, gen.k))
    for i in range(K + 1):
        st = ens.state(i)
        t = ens.t[i]
        f0 = np.linalg.norm(gen.F(t, zeros_y, zeros_z, st), axis=-1)
        g0 = np.linalg.norm(gen.G(t, zeros_y, st), axis=-1)
        beta[:, i] = (t + ens.A[:, i] + np.abs(per_path(gen.mu(t, st), N))
                      + np.abs(per_path(gen.nu(t, st), N)) + per_path(gen.ell(t, st), N)
                      + ens.Vplus[:, i] + f0 + g0)
    return beta


def truncate_problem(problem: Problem, n: float, ens: PathEnsemble):
    """Truncated problem of level ``n``.

    Returns ``(problem_n, eta_gate, beta)``: ``problem_n`` carries
    ``eta 1[|eta| + phi(eta) + psi(eta) + V+_T <= n]`` as fixed terminal
    values and drivers multiplied by ``1[beta_t <= n]``.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if ens.Vplus is None:
        ens = compute_weights(ens, problem.gen, problem.p, problem.lam)
    eta = problem.terminal(ens)
    size = (np.linalg.norm(eta, axis=-1) + cv.value(problem.phi, eta)
            + cv.value(problem.psi, eta) + ens.Vplus[np.arange(ens.N), ens.exit_index])
    keep = size <= n
    eta_n = np.where(keep[:, None], eta, 0.0)
    beta = truncation_level(ens, problem)
    gates = (beta <= n).astype(float)

    def gate(t, state):
        if state is None or state.path is None or state.step is None:
            raise ValueError("truncated drivers need path-indexed states from the ensemble")
        return gates[state.path, state.step]

    gen_n = scaled(problem.gen, gate, problem.gen.tag + "~trunc")
    return dataclasses.replace(problem, gen=gen_n, eta_values=eta_n), keep, beta


# ---------------------------------------------------------------- subdifferential check


def subdiff_test(sol: MultivaluedSolution, ens: PathEnsemble, phi, psi, test_paths,
                 windows=None) -> dict:
    """Discrete check of the subdifferential inclusion of ``K``.

    For each test function ``y(.)`` (an ``(N, K+1, m)`` array or a callable
    ``f(t) -> (m,)``) and window ``[a, b]`` of node indices, returns the mean
    over paths of

    ``sum <y_i - Yp_i, -dK_i> + sum Psi(Yp_i) dQ_i - sum Psi(y_i) dQ_i``

    where ``Yp`` is the reported feasible solution ``Y_proj``.  Test functions
    with infinite ``Psi`` are skipped.
    """
    K = ens.K
    windows = windows or [(0, K)]
    dK = np.diff(sol.K, axis=1)
    yp = sol.Y_proj
    psi_sol = obstacle_value(phi, psi, yp[:, :-1], ens.alpha) * ens.active
    out = {}
    for name, y in test_paths.items():
        if callable(y):
            vals = np.array([np.asarray(y(t), dtype=float).reshape(-1) for t in ens.t])
            y = np.broadcast_to(vals[None], yp.shape)
        y = np.asarray(y, dtype=float)
        psi_test = obstacle_value(phi, psi, y[:, :-1], ens.alpha)
        if not np.all(np.isfinite(psi_test[ens.active])):
            out[name] = {"skipped": True, "note": "test function outside the effective domain"}
            continue
        psi_test = psi_test * ens.active
        inner = np.sum((y[:, :-1] - yp[:, :-1]) * (-dK), axis=-1)
        rows = []
        for a, b in windows:
            s = slice(a, b)
            res = inner[:, s].sum(1) + (psi_sol[:, s] * ens.dQ[:, s]).sum(1) - (psi_test[:, s] * ens.dQ[:, s]).sum(1)
            rows.append({"window": [int(a), int(b)], "residual": float(res.mean()),
                         "se": float(res.std() / np.sqrt(ens.N))})
        out[name] = {"skipped": False, "windows": rows}
    return out


# ---------------------------------------------------------------- export


def solution_rows(sol: MultivaluedSolution, max_paths: Optional[int] = None):
    N, K1, m = sol.Y.shape
    k = sol.Z.shape[-1]
    n = N if max_paths is None else min(max_paths, N)
    header = (["path", "step"] + [f"Y{j + 1}" for j in range(m)]
              + [f"Z{j + 1}_{c + 1}" for j in range(m) for c in range(k)]
              + [f"K{j + 1}" for j in range(m)])
    rows = []
    for p in range(n):
        for i in range(K1):
            z = sol.Z[p, i].ravel() if i < K1 - 1 else np.zeros(m * k)
            rows.append([p, i] + [repr(float(v)) for v in sol.Y[p, i]]
                        + [repr(float(v)) for v in z] + [repr(float(v)) for v in sol.K[p, i]])
    return header, rows


def write_solution_csv(sol: MultivaluedSolution, path, comments=(), max_paths=None):
    header, rows = solution_rows(sol, max_paths)
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def solution_summary(sol: MultivaluedSolution) -> dict:
    return {
        "y0_mean": [float(v) for v in sol.y0],
        "y0_se": sol.y0_se,
        "eps_schedule": sol.eps_schedule,
        "cauchy_residuals": sol.cauchy_residuals,
        "penalty_energy": sol.penalty_energy,
        "y0_history": sol.y0_history,
        "converged": sol.converged,
        "mean_dK": float(np.mean(np.diff(sol.K, axis=1))),
    }


def save_arrays(sol: MultivaluedSolution, path):
    """Store ``Y``, ``Z``, ``K`` and the schedule as raw ``.npy`` files in a directory."""
    import os
    os.makedirs(path, exist_ok=True)
    for name, arr in (("Y", sol.Y), ("Z", sol.Z), ("K", sol.K), ("Y_proj", sol.Y_proj)):
        np.save(os.path.join(path, f"{name}.npy"), arr, allow_pickle=False)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(solution_summary(sol), fh, indent=1, sort_keys=True)
