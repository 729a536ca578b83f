"""Brownian ensembles, the clock ``Q = t + A``, weights and smoothing.

Every path draws its increments from its own counter-based Philox stream
(key = seed, counter offset = path index), so an ensemble is identical no
matter how many worker threads build it.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .generators import GeneratorSpec, PathState, per_path

# Integrand catalog for IntegralClock: A_t = scale * int_0^t g(B_s) ds.
CLOCK_INTEGRANDS = {
    "abs": lambda b: np.abs(b),
    "square": lambda b: b * b,
    "pos": lambda b: np.maximum(b, 0.0),
    "one": lambda b: np.ones_like(b),
}

DEFAULT_CELL_CAP = 200_000_000


class RegressionError(RuntimeError):
    """Rank-deficient regression design."""


class ResourceLimitError(ValueError):
    """Requested ensemble exceeds the configured size cap."""


@dataclass(frozen=True)
class Clock:
    """Increasing clock ``A``.

    ``kind`` is ``none`` (``A = 0``), ``linear`` (``A_t = c t``) or
    ``integral`` (``A_t = c * int_0^t g(B_s) ds`` with ``g`` from
    :data:`CLOCK_INTEGRANDS`).
    """

    kind: str = "none"
    c: float = 0.0
    g: str = "abs"

    def __post_init__(self):
        if self.kind not in ("none", "linear", "integral"):
            raise ValueError(f"unknown clock kind {self.kind!r}")
        if self.c < 0:
            raise ValueError("clock scale must be nonnegative")
        if self.kind == "integral" and self.g not in CLOCK_INTEGRANDS:
            raise ValueError(f"unknown clock integrand {self.g!r}")

    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "linear":
            return f"linear({self.c!r})"
        return f"integral({self.g}, {self.c!r})"


@dataclass(frozen=True)
class GridConfig:
    """Time grid, ensemble size and seed.

    ``exit_level`` (``L``) turns on the random horizon: ``tau`` is the first
    grid time with ``|B^1| >= L``, capped at ``T``.
    """

    T: float = 1.0
    K: int = 100
    N: int = 1000
    k: int = 1
    m: int = 1
    seed: int = 0
    clock: Clock = Clock()
    exit_level: Optional[float] = None
    cell_cap: int = DEFAULT_CELL_CAP

    def __post_init__(self):
        if not (self.T > 0 and self.K >= 1 and self.N >= 1 and self.k >= 1 and self.m >= 1):
            raise ValueError("T, K, N, k, m must be positive")
        if not (0 <= self.seed < 2 ** 64):
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.exit_level is not None and not self.exit_level > 0:
            raise ValueError("exit_level must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.K


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated driving data on a uniform grid.

    Arrays are indexed ``[path, step]``; ``B`` is ``(N, K+1, k)`` and
    ``dB`` is ``(N, K, k)``.  ``active[:, i]`` marks steps ``[t_i, t_{i+1}]``
    that start strictly before the horizon; ``in_horizon[:, i]`` marks nodes
    with ``t_i <= tau``.
    """

    cfg: GridConfig
    t: np.ndarray
    B: np.ndarray
    dB: np.ndarray
    A: np.ndarray
    dA: np.ndarray
    Q: np.ndarray
    dQ: np.ndarray
    alpha: np.ndarray
    exit_index: np.ndarray
    active: np.ndarray
    in_horizon: np.ndarray
    V: Optional[np.ndarray] = None
    Vplus: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def K(self) -> int:
        return self.dB.shape[1]

    @property
    def dt(self) -> float:
        return self.cfg.dt

    def state(self, i: int) -> PathState:
        return PathState(self.B[:, i, :], self.A[:, i], i, np.arange(self.N))

    def features(self, i: int) -> np.ndarray:
        """Regression state at node ``i``: ``B_i`` plus ``A_i`` when random."""
        cols = [self.B[:, i, :]]
        if self.cfg.clock.kind == "integral":
            cols.append(self.A[:, i:i + 1])
        return np.concatenate(cols, axis=1)

    def weights(self):
        """``(V, V+)``, zero arrays if weights were not computed."""
        if self.V is None:
            z = np.zeros_like(self.Q)
            return z, z
        return self.V, self.Vplus


def _path_increments(seed: int, start: int, stop: int, K: int, k: int, sd: float, out):
    for j in range(start, stop):
        gen = np.random.Generator(np.random.Philox(key=seed, counter=[0, 0, 0, j]))
        out[j] = gen.standard_normal((K, k)) * sd


def simulate(cfg: GridConfig, threads: int = 1) -> PathEnsemble:
    """Simulate the ensemble described by ``cfg``.

    Parameters
    ----------
    cfg : GridConfig
    threads : int
        Worker threads for increment generation; results do not depend on it.
    """
    cells = cfg.N * cfg.K * cfg.k
    if cells > cfg.cell_cap:
        raise ResourceLimitError(f"N*K*k = {cells} exceeds cap {cfg.cell_cap}")
    N, K, k = cfg.N, cfg.K, cfg.k
    dt = cfg.dt
    dB = np.empty((N, K, k))
    threads = max(1, int(threads))
    if threads == 1 or N < 2 * threads:
        _path_increments(cfg.seed, 0, N, K, k, np.sqrt(dt), dB)
    else:
        bounds = np.linspace(0, N, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            futs = [pool.submit(_path_increments, cfg.seed, lo, hi, K, k, np.sqrt(dt), dB)
                    for lo, hi in zip(bounds[:-1], bounds[1:])]
            for f in futs:
                f.result()
    B = np.zeros((N, K + 1, k))
    np.cumsum(dB, axis=1, out=B[:, 1:, :])
    t = np.linspace(0.0, cfg.T, K + 1)

    clock = cfg.clock
    if clock.kind == "none":
        dA = np.zeros((N, K))
    elif clock.kind == "linear":
        dA = np.full((N, K), clock.c * dt)
    else:
        dA = clock.c * CLOCK_INTEGRANDS[clock.g](B[:, :-1, 0]) * dt
    A = np.zeros((N, K + 1))
    np.cumsum(dA, axis=1, out=A[:, 1:])
    Q = t[None, :] + A
    dQ = dt + dA
    alpha = dt / dQ

    if cfg.exit_level is None:
        exit_index = np.full(N, K)
    else:
        hit = np.abs(B[:, :, 0]) >= cfg.exit_level
        exit_index = np.where(hit.any(axis=1), hit.argmax(axis=1), K)
    steps = np.arange(K + 1)
    in_horizon = steps[None, :] <= exit_index[:, None]
    active = steps[None, :K] < exit_index[:, None]
    return PathEnsemble(cfg, t, B, dB, A, dA, Q, dQ, alpha, exit_index, active, in_horizon)


def compute_weights(ens: PathEnsemble, gen: GeneratorSpec, p: float, lam: float) -> PathEnsemble:
    """Attach the weights ``V`` and ``V+`` (left-endpoint sums)."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    if not 0 < lam < 1:
        raise ValueError("lambda must lie in (0, 1)")
    n_p = min(p - 1.0, 1.0)
    N, K = ens.N, ens.K
    inc = np.zeros((N, K))
    inc_plus = np.zeros((N, K))
    for i in range(K):
        st = ens.state(i)
        ti = ens.t[i]
        mu = per_path(gen.mu(ti, st), N)
        nu = per_path(gen.nu(ti, st), N)
        ell = per_path(gen.ell(ti, st), N)
        rate = mu + ell ** 2 / (2.0 * n_p * lam)
        act = ens.active[:, i]
        inc[:, i] = np.where(act, rate * ens.dt + nu * ens.dA[:, i], 0.0)
        inc_plus[:, i] = np.where(act, np.maximum(rate, 0.0) * ens.dt
                                  + np.maximum(nu, 0.0) * ens.dA[:, i], 0.0)
    V = np.zeros((N, K + 1))
    Vp = np.zeros((N, K + 1))
    np.cumsum(inc, axis=1, out=V[:, 1:])
    np.cumsum(inc_plus, axis=1, out=Vp[:, 1:])
    return dataclasses.replace(ens, V=V, Vplus=Vp)


# ---------------------------------------------------------------- regression


@dataclass
class RegressionDiagnostics:
    rows: int
    columns: int
    degree: int
    condition: float


def _basis(x: np.ndarray, degree: int) -> np.ndarray:
    n, d = x.shape
    cols = [np.ones(n)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(x[:, combo], axis=1))
    return np.stack(cols, axis=1)


def _n_basis(d: int, degree: int) -> int:
    from math import comb
    return comb(d + degree, degree)


class Regressor:
    """Least-squares projection on total-degree polynomials of the state.

    Features are standardised per call; constant features are dropped.  The
    degree is lowered when fewer rows than basis functions are available.
    """

    def __init__(self, x: np.ndarray, degree: int = 3, rank_tol: float = 1e-10):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        if n == 0:
            raise RegressionError("no rows to regress on")
        mean = x.mean(axis=0)
        sd = x.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mean))
        xs = (x[:, keep] - mean[keep]) / sd[keep]
        d = xs.shape[1]
        deg = degree if d > 0 else 0
        while deg > 0 and _n_basis(d, deg) > n:
            deg -= 1
        design = _basis(xs, deg)
        q, r = np.linalg.qr(design)
        diag = np.abs(np.diag(r))
        cond = float(np.linalg.cond(r)) if r.size else 1.0
        self.diagnostics = RegressionDiagnostics(n, design.shape[1], deg, cond)
        if diag.size and diag.min() <= rank_tol * diag.max():
            raise RegressionError(
                f"rank-deficient design: rows={n}, columns={design.shape[1]}, "
                f"degree={deg}, condition={cond:.3e}"
            )
        self._q = q

    def project(self, target: np.ndarray) -> np.ndarray:
        """Fitted values of ``target`` (``(n,)`` or ``(n, c)``)."""
        target = np.asarray(target, dtype=float)
        flat = target.reshape(target.shape[0], -1)
        fitted = self._q @ (self._q.T @ flat)
        return fitted.reshape(target.shape)


def conditional_expectation(ens: PathEnsemble, i: int, target: np.ndarray, degree: int = 3,
                            mask: Optional[np.ndarray] = None):
    """Regression estimate of ``E[target | state at node i]``.

    Rows outside ``mask`` are returned unchanged.
    """
    target = np.asarray(target, dtype=float)
    x = ens.features(i)
    if mask is None:
        reg = Regressor(x, degree)
        return reg.project(target), reg.diagnostics
    out = target.copy()
    if not mask.any():
        return out, None
    reg = Regressor(x[mask], degree)
    out[mask] = reg.project(target[mask])
    return out, reg.diagnostics


# ---------------------------------------------------------------- terminals


@dataclass(frozen=True)
class Terminal:
    """Terminal value ``eta`` as a function of ``B^1`` at the horizon.

    ``kind``: ``constant`` (``value``), ``brownian`` (``shift + scale B``),
    ``square`` (``shift + scale B^2``), ``clamped`` (``clip(B, lo, hi)``) or
    ``custom`` (``fn(B)``).  The scalar is copied to all ``m`` components.
    """

    kind: str = "constant"
    value: float = 0.0
    scale: float = 1.0
    shift: float = 0.0
    lo: float = -1.0
    hi: float = 1.0
    fn: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("constant", "brownian", "square", "clamped", "custom"):
            raise ValueError(f"unknown terminal kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom terminal needs fn")

    def apply(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.kind == "constant":
            return np.full_like(b, self.value)
        if self.kind == "brownian":
            return self.shift + self.scale * b
        if self.kind == "square":
            return self.shift + self.scale * b * b
        if self.kind == "clamped":
            return np.clip(b, self.lo, self.hi)
        return np.asarray(self.fn(b), dtype=float)

    def evaluate(self, ens: PathEnsemble, m: Optional[int] = None) -> np.ndarray:
        """``(N, m)`` terminal values at each path's horizon node."""
        m = ens.cfg.m if m is None else m
        b = ens.B[np.arange(ens.N), ens.exit_index, 0]
        return np.repeat(self.apply(b)[:, None], m, axis=1)

    def label(self) -> str:
        if self.kind == "constant":
            return f"constant({self.value!r})"
        if self.kind in ("brownian", "square"):
            return f"{self.kind}({self.scale!r}, {self.shift!r})"
        if self.kind == "clamped":
            return f"clamped({self.lo!r}, {self.hi!r})"
        return "custom"


@dataclass(frozen=True)
class MartingalePair:
    """``xi_i = E_i[eta]`` and its integrand ``zeta`` on the grid."""

    xi: np.ndarray
    zeta: np.ndarray
    method: str


def martingale_pair(eta: Terminal, ens: PathEnsemble, method: str = "closed",
                    degree: int = 3) -> MartingalePair:
    """Martingale representation of ``eta``.

    ``closed`` uses Ito calculus for ``constant``, ``brownian`` (also with a
    random horizon, as a stopped Brownian motion) and ``square`` (fixed
    horizon).  ``regression`` estimates ``xi_i`` by least squares of
    ``eta`` on the state at node ``i`` and ``zeta_i`` by
    ``E_i[xi_{i+1} dB_i] / dt``.
    """
    N, K, k, m = ens.N, ens.K, ens.cfg.k, ens.cfg.m
    term = eta.evaluate(ens, m)
    xi = np.zeros((N, K + 1, m))
    zeta = np.zeros((N, K, m, k))
    random_h = ens.cfg.exit_level is not None
    if method == "closed":
        stop = np.minimum(np.arange(K + 1)[None, :], ens.exit_index[:, None])
        b_stop = np.take_along_axis(ens.B[:, :, 0], stop, axis=1)
        if eta.kind == "constant":
            xi[:] = eta.value
        elif eta.kind == "brownian":
            xi[:] = (eta.shift + eta.scale * b_stop)[:, :, None]
            zeta[:, :, :, 0] = np.where(ens.active, eta.scale, 0.0)[:, :, None]
        elif eta.kind == "square" and not random_h:
            b = ens.B[:, :, 0]
            xi[:] = (eta.shift + eta.scale * (b * b + ens.cfg.T - ens.t[None, :]))[:, :, None]
            zeta[:, :, :, 0] = (2.0 * eta.scale * b[:, :-1])[:, :, None]
        else:
            raise ValueError(f"no closed form for terminal {eta.label()} on this horizon")
        xi[:, K] = term
        return MartingalePair(xi, zeta, "closed-form")
    if method != "regression":
        raise ValueError(f"unknown method {method!r}")
    xi[:, K] = term
    for i in range(K - 1, -1, -1):
        alive = ens.active[:, i]
        xi[:, i] = term
        if alive.any():
            fit, _ = conditional_expectation(ens, i, term, degree, alive)
            xi[alive, i] = fit[alive]
            prod = xi[:, i + 1, :, None] * ens.dB[:, i, None, :]
            zfit, _ = conditional_expectation(ens, i, prod.reshape(N, -1), degree, alive)
            zeta[alive, i] = zfit[alive].reshape(-1, m, k) / ens.dt
    return MartingalePair(xi, zeta, "regression")


# ---------------------------------------------------------------- smoothing


def _kernel_weights(x: np.ndarray):
    """Weights of the left/right node values for a linear segment.

    Returns ``(1 - e^-x, (1 - e^-x (1 + x)) / x, e^-x)``.
    """
    one_minus = -np.expm1(-x)
    ex = np.exp(-x)
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    lin = np.where(small, x / 2 - x * x / 3 + x ** 3 / 8, (one_minus - x * ex) / xs)
    return one_minus, lin, ex


def smooth_pathwise(U: np.ndarray, ens: PathEnsemble, eps: float):
    """Exponentially smoothed process before conditioning.

    ``U_eps(t) = (1/Q_eps) int_{t v eps}^inf exp(-(Q_r - Q_{t v eps})/Q_eps) U_r dQ_r``
    with ``U`` linear in ``Q`` between nodes (the kernel is integrated
    exactly on each cell) and ``U_r = U_T`` beyond the grid.

    Returns
    -------
    smoothed : ndarray, same shape as ``U``
    q_eps : ndarray, ``(N,)`` clock at time ``eps``
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if eps > ens.cfg.T:
        raise ValueError("eps must not exceed the horizon")
    if eps < ens.dt:
        warnings.warn("eps below one grid step: smoothing kernel under-resolved", stacklevel=2)
    U = np.asarray(U, dtype=float)
    squeeze = U.ndim == 2
    if squeeze:
        U = U[:, :, None]
    N, K1, _ = U.shape
    K = K1 - 1
    t = ens.t
    j = min(int(np.searchsorted(t, eps - 1e-12 * ens.dt, side="left")), K)
    # clock and U at time eps, linear interpolation inside cell [j-1, j]
    if j == 0 or np.isclose(t[j], eps, rtol=0, atol=1e-12 * ens.dt):
        q_eps = ens.Q[:, j].copy()
        u_eps = U[:, j].copy()
        on_node = True
    else:
        w = (eps - t[j - 1]) / ens.dt
        q_eps = (1 - w) * ens.Q[:, j - 1] + w * ens.Q[:, j]
        u_eps = (1 - w) * U[:, j - 1] + w * U[:, j]
        on_node = False
    out = np.empty_like(U)
    S = U[:, K].copy()
    out[:, K] = S
    for i in range(K - 1, j - 1, -1):
        x = (ens.dQ[:, i] / q_eps)[:, None]
        c0, c1, ex = _kernel_weights(x)
        S = U[:, i] * c0 + (U[:, i + 1] - U[:, i]) * c1 + ex * S
        out[:, i] = S
    if not on_node:
        x = ((ens.Q[:, j] - q_eps) / q_eps)[:, None]
        c0, c1, ex = _kernel_weights(x)
        s_eps = u_eps * c0 + (U[:, j] - u_eps) * c1 + ex * out[:, j]
    else:
        s_eps = out[:, j]
    out[:, :j] = s_eps[:, None, :]
    return (out[:, :, 0] if squeeze else out), q_eps


def exp_smooth(U: np.ndarray, ens: PathEnsemble, eps: float, degree: int = 3) -> np.ndarray:
    """``M_eps(t) = E_t[U_eps(t)]`` by regression on the state at each node."""
    smoothed, _ = smooth_pathwise(U, ens, eps)
    out = np.empty_like(smoothed)
    for i in range(ens.K + 1):
        out[:, i], _ = conditional_expectation(ens, i, smoothed[:, i], degree)
    return out


def smoothing_bound_check(U: np.ndarray, ens: PathEnsemble, eps: float, degree: int = 3,
                          se_mult: float = 3.0) -> dict:
    """One-sided check of ``|M_eps(t)| <= E_t sup_r |U_r|`` node by node.

    Both sides are regression estimates, so the mean positive excess over
    paths at each node is compared with ``se_mult`` standard errors of the
    running supremum.
    """
    U = np.asarray(U, dtype=float)
    M = exp_smooth(U, ens, eps, degree)
    mag = np.abs(U) if U.ndim == 2 else np.linalg.norm(U, axis=-1)
    sup = mag.max(axis=1)
    mnorm = np.abs(M) if M.ndim == 2 else np.linalg.norm(M, axis=-1)
    excess = np.zeros(ens.K + 1)
    for i in range(ens.K + 1):
        bound, _ = conditional_expectation(ens, i, sup, degree)
        excess[i] = np.mean(np.maximum(mnorm[:, i] - bound, 0.0))
    tol = float(se_mult * np.std(sup) / np.sqrt(ens.N))
    worst = float(excess.max())
    return {"eps": float(eps), "worst_excess": worst, "tolerance": tol, "passed": bool(worst <= tol)}


# ---------------------------------------------------------------- export


def ensemble_rows(ens: PathEnsemble, max_paths: Optional[int] = None):
    """Rows ``(path, step, B_1..B_k, A, Q, V)`` for CSV export."""
    V, _ = ens.weights()
    n = ens.N if max_paths is None else min(max_paths, ens.N)
    header = ["path", "step"] + [f"B{c + 1}" for c in range(ens.cfg.k)] + ["A", "Q", "V"]
    rows = []
    for p in range(n):
        for i in range(ens.K + 1):
            rows.append([p, i] + [repr(float(v)) for v in ens.B[p, i]]
                        + [repr(float(ens.A[p, i])), repr(float(ens.Q[p, i])), repr(float(V[p, i]))])
    return header, rows


def write_ensemble_csv(ens: PathEnsemble, path, comments=(), max_paths: Optional[int] = None):
    header, rows = ensemble_rows(ens, max_paths)
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
