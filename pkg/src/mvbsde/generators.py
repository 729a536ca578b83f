"""Drivers ``F(t, y, z)``, ``G(t, y)``, their coefficients and the mollifier.

Shapes used throughout: ``y`` is ``(n, m)``, ``z`` is ``(n, m, k)`` and the
drivers return ``(n, m)``.  Time ``t`` is a scalar or an ``(n,)`` array.
Coefficient functions return a scalar or an ``(n,)`` array.  A
:class:`PathState` carries the Brownian value ``b`` (``(n, k)``) and clock
value ``a`` (``(n,)``) for drivers whose coefficients depend on the path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import integrate, optimize, special
from scipy.stats import qmc

from . import convex as cv

# Grid density used for the sharp bound of custom drivers.
SHARP_GRID_PER_UNIT = 1000


@dataclass(frozen=True)
class PathState:
    """Path values visible to a driver at one time step."""

    b: np.ndarray
    a: Optional[np.ndarray] = None
    step: Optional[int] = None
    path: Optional[np.ndarray] = None

    def take(self, idx: np.ndarray) -> "PathState":
        return PathState(
            self.b[idx],
            None if self.a is None else self.a[idx],
            self.step,
            None if self.path is None else self.path[idx],
        )


@dataclass(frozen=True)
class GeneratorSpec:
    """A pair of drivers with their monotonicity/Lipschitz coefficients.

    Attributes
    ----------
    F, G : callable
        ``F(t, y, z, state)`` and ``G(t, y, state)``.
    mu, nu, ell : callable
        ``coef(t, state)``; ``mu`` and ``nu`` bound the one-sided slopes of
        ``F`` and ``G`` in ``y``, ``ell`` the Lipschitz constant of ``F`` in
        ``z``.
    tag : str
        Catalog name.
    params : tuple
        ``(name, value)`` pairs describing the catalog member.
    lipschitz_y : bool
        Whether the drivers are globally Lipschitz in ``y``.  Non-Lipschitz
        drivers are mollified inside the solver.
    sharp : callable, optional
        ``sharp(rho, t, state) -> (F_sharp, G_sharp)`` closed form.
    """

    F: Callable
    G: Callable
    mu: Callable
    nu: Callable
    ell: Callable
    tag: str = "custom"
    params: Tuple = ()
    m: int = 1
    k: int = 1
    lipschitz_y: bool = True
    sharp: Optional[Callable] = field(default=None, compare=False)

    def label(self) -> str:
        if not self.params:
            return self.tag
        return self.tag + "(" + ", ".join(f"{k}={v}" for k, v in self.params) + ")"


def _const(c: float) -> Callable:
    return lambda t, state=None: c


def _zero_G(m):
    return lambda t, y, state=None: np.zeros_like(np.asarray(y, dtype=float))


# ---------------------------------------------------------------- catalog


def linear(rho: float = 0.0, drift: float = 0.0, g_rho: float = 0.0,
           g_drift: float = 0.0, m: int = 1, k: int = 1) -> GeneratorSpec:
    """``F = -rho * y + drift`` and ``G = -g_rho * y + g_drift``."""
    rho, drift, g_rho, g_drift = map(float, (rho, drift, g_rho, g_drift))

    def F(t, y, z, state=None):
        return -rho * np.asarray(y, dtype=float) + drift

    def G(t, y, state=None):
        return -g_rho * np.asarray(y, dtype=float) + g_drift

    root_m = np.sqrt(m)

    def sharp(r, t, state=None):
        return abs(rho) * r + abs(drift) * root_m, abs(g_rho) * r + abs(g_drift) * root_m

    params = (("rho", rho), ("drift", drift), ("g_rho", g_rho), ("g_drift", g_drift))
    return GeneratorSpec(F, G, _const(-rho), _const(-g_rho), _const(0.0), "linear",
                         params, m, k, True, sharp)


def zero_driver(m: int = 1, k: int = 1) -> GeneratorSpec:
    return linear(0.0, m=m, k=k)


def cubic_monotone(m: int = 1, k: int = 1) -> GeneratorSpec:
    """``F = -|y|^2 y`` and ``G = -|y| y``: monotone, not Lipschitz in ``y``."""

    def F(t, y, z, state=None):
        y = np.asarray(y, dtype=float)
        return -np.sum(y * y, axis=-1, keepdims=True) * y

    def G(t, y, state=None):
        y = np.asarray(y, dtype=float)
        return -np.linalg.norm(y, axis=-1, keepdims=True) * y

    def sharp(r, t, state=None):
        return r ** 3, r ** 2

    return GeneratorSpec(F, G, _const(0.0), _const(0.0), _const(0.0), "cubic",
                         (), m, k, False, sharp)


def example_a6(a_tilde: float = 0.1, a: float = 1.0, b: float = 0.0,
               c_tilde: float = 0.1, c: float = 1.0, d: float = 0.0,
               f1: Callable = np.tanh, f2: Callable = None) -> GeneratorSpec:
    """Path-dependent coefficients driven by the Brownian value ``B_t``.

    ``F = mu_t (y - f1(B_t y)) + ell_t f2(z)`` with
    ``mu_t = a_tilde B_t |B_t|^a / t^b`` and
    ``ell_t = c_tilde |B_t|^((c+1)/2) / t^(d/2)``; ``G = 0``.  Both
    coefficients are set to 0 at ``t = 0``.  ``f1`` must be nondecreasing
    and ``f2`` 1-Lipschitz and nondecreasing.
    """
    if not (a_tilde > 0 and c_tilde > 0 and 0 <= b < 1 and 0 <= d < 1
            and 0 < a <= 1 and -1 < c <= 1):
        raise ValueError("coefficients outside the admissible range")
    identity_f2 = f2 is None
    f2 = (lambda z: z) if identity_f2 else f2

    def _bt(state):
        if state is None:
            raise ValueError("example_a6 needs a PathState")
        return np.asarray(state.b, dtype=float)[:, 0]

    def mu(t, state=None):
        bt = _bt(state)
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = a_tilde * bt * np.abs(bt) ** a / np.where(t > 0, t, 1.0) ** b
        return np.where(t > 0, val, 0.0)

    def ell(t, state=None):
        bt = _bt(state)
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = c_tilde * np.abs(bt) ** ((c + 1) / 2) / np.where(t > 0, t, 1.0) ** (d / 2)
        return np.where(t > 0, val, 0.0)

    def F(t, y, z, state=None):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        bt = _bt(state)
        drift = mu(t, state)[:, None] * (y - f1(bt[:, None] * y))
        return drift + ell(t, state)[:, None] * f2(z[..., 0])

    def sharp(r, t, state=None):
        bt = _bt(state)
        h = np.abs(r - f1(bt * r))
        if f1 is np.tanh:
            # interior extremum of y - tanh(B y) where cosh^2(B y) = B
            with np.errstate(invalid="ignore", divide="ignore"):
                ystar = np.where(bt >= 1, np.arccosh(np.sqrt(np.maximum(bt, 1.0))) / np.where(bt > 0, bt, 1.0), 0.0)
            inner = np.where(ystar <= r, np.abs(ystar - np.tanh(bt * ystar)), 0.0)
            h = np.maximum(h, inner)
        else:
            h = _grid_sup(lambda yy: np.abs(yy - f1(bt[:, None] * yy)), r)
        extra = 0.0 if identity_f2 else np.abs(ell(t, state) * f2(np.zeros(1))[0])
        return np.abs(mu(t, state)) * h + extra, np.zeros_like(bt)

    params = (("a_tilde", a_tilde), ("a", a), ("b", b), ("c_tilde", c_tilde), ("c", c), ("d", d))
    return GeneratorSpec(F, _zero_G(1), mu, _const(0.0), ell, "example_a6", params,
                         1, 1, False, sharp)


def custom(F: Callable, G: Callable = None, mu=0.0, nu=0.0, ell=0.0, m: int = 1,
           k: int = 1, lipschitz_y: bool = True, tag: str = "custom") -> GeneratorSpec:
    """Wrap user drivers; constant coefficients may be passed as numbers."""
    wrap = lambda c: c if callable(c) else _const(float(c))
    G = G if G is not None else _zero_G(m)
    return GeneratorSpec(F, G, wrap(mu), wrap(nu), wrap(ell), tag, (), m, k, lipschitz_y, None)


def scaled(gen: GeneratorSpec, gate: Callable, tag: str = "gated") -> GeneratorSpec:
    """Multiply drivers and coefficients by ``gate(t, state)`` in ``[0, 1]``."""

    def F(t, y, z, state=None):
        return np.asarray(gate(t, state))[..., None] * gen.F(t, y, z, state)

    def G(t, y, state=None):
        return np.asarray(gate(t, state))[..., None] * gen.G(t, y, state)

    def coef(fn):
        return lambda t, state=None: np.asarray(gate(t, state)) * fn(t, state)

    def sharp(r, t, state=None):
        g = np.asarray(gate(t, state))
        fs, gs = sharp_bound(gen, r, t, state)
        return g * fs, g * gs

    return GeneratorSpec(F, G, coef(gen.mu), coef(gen.nu), coef(gen.ell), tag,
                         gen.params, gen.m, gen.k, gen.lipschitz_y, sharp)


def per_path(value, n: int) -> np.ndarray:
    """Broadcast a coefficient value to an ``(n,)`` array."""
    return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()


# ---------------------------------------------------------------- bounds


def _grid_sup(fun: Callable, r: float) -> np.ndarray:
    npts = max(int(np.ceil(2 * r * SHARP_GRID_PER_UNIT)) + 1, 3)
    grid = np.linspace(-r, r, npts)[None, :]
    return np.max(fun(grid), axis=-1)


def sharp_bound(gen: GeneratorSpec, rho: float, t, state: PathState = None):
    """``(sup_{|y|<=rho} |F(t, y, 0)|, sup_{|y|<=rho} |G(t, y)|)``.

    Catalog drivers use closed forms.  Custom drivers use a grid with
    ``SHARP_GRID_PER_UNIT`` points per unit length along each coordinate axis
    (and, for ``m > 1``, along 16 fixed extra directions).
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    if gen.sharp is not None:
        return gen.sharp(rho, t, state)
    m, k = gen.m, gen.k
    npts = max(int(np.ceil(2 * rho * SHARP_GRID_PER_UNIT)) + 1, 3)
    s = np.linspace(-rho, rho, npts)
    dirs = np.eye(m)
    if m > 1:
        extra = np.random.default_rng(0).standard_normal((16, m))
        dirs = np.vstack([dirs, extra / np.linalg.norm(extra, axis=1, keepdims=True)])
    pts = (s[:, None, None] * dirs[None, :, :]).reshape(-1, m)
    n_state = 1 if state is None else np.asarray(state.b).shape[0]
    best_f = np.zeros(n_state)
    best_g = np.zeros(n_state)
    for j in range(n_state):
        st = None if state is None else state.take(np.full(len(pts), j))
        tj = t if np.ndim(t) == 0 else np.asarray(t)[j]
        fv = gen.F(tj, pts, np.zeros((len(pts), m, k)), st)
        gv = gen.G(tj, pts, st)
        best_f[j] = np.max(np.linalg.norm(fv, axis=-1))
        best_g[j] = np.max(np.linalg.norm(gv, axis=-1))
    if state is None:
        return float(best_f[0]), float(best_g[0])
    return best_f, best_g


def combined_H(gen: GeneratorSpec, alpha, in_horizon, t, y, z, state: PathState = None):
    """``alpha * F + (1 - alpha) * G`` inside the horizon, zero outside."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    y = np.asarray(y, dtype=float)
    out = alpha[..., None] * gen.F(t, y, z, state) + (1 - alpha)[..., None] * gen.G(t, y, state)
    return np.where(np.asarray(in_horizon, dtype=bool)[..., None], out, 0.0)


def beta_trunc(z, eps: float) -> np.ndarray:
    """Project ``z`` onto the ball of radius ``1/eps``.

    The norm is taken over the last two axes when ``z`` has at least two
    dimensions (matrix-valued ``z``), over the whole input for scalars.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    z = np.asarray(z, dtype=float)
    if z.ndim >= 2:
        norm = np.sqrt(np.sum(z * z, axis=(-2, -1), keepdims=True))
    else:
        norm = np.abs(z)
    return z / np.maximum(1.0, eps * norm)


# ---------------------------------------------------------------- samples & checks


@dataclass
class SampleSet:
    """Random evaluation points for sample-based driver checks."""

    t: np.ndarray
    y: np.ndarray
    z: np.ndarray
    state: Optional[PathState] = None

    @property
    def n(self) -> int:
        return self.y.shape[0]


def random_samples(gen: GeneratorSpec, n: int, seed: int = 0, y_scale: float = 2.0,
                   z_scale: float = 2.0, t_range=(0.05, 1.0)) -> SampleSet:
    rng = np.random.default_rng(seed)
    t = rng.uniform(*t_range, n)
    y = rng.uniform(-y_scale, y_scale, (n, gen.m))
    z = rng.uniform(-z_scale, z_scale, (n, gen.m, gen.k))
    b = rng.standard_normal((n, gen.k)) * np.sqrt(t)[:, None]
    return SampleSet(t, y, z, PathState(b, np.zeros(n)))


def monotonicity_violation(gen: GeneratorSpec, s: SampleSet, seed: int = 1) -> float:
    """Largest excess of ``<y'-y, F(y')-F(y)> - mu |y'-y|^2`` over samples."""
    rng = np.random.default_rng(seed)
    y2 = s.y + rng.normal(0, 1, s.y.shape)
    d = y2 - s.y
    df = gen.F(s.t, y2, s.z, s.state) - gen.F(s.t, s.y, s.z, s.state)
    dg = gen.G(s.t, y2, s.state) - gen.G(s.t, s.y, s.state)
    sq = np.sum(d * d, axis=-1)
    ex_f = np.sum(d * df, axis=-1) - per_path(gen.mu(s.t, s.state), s.n) * sq
    ex_g = np.sum(d * dg, axis=-1) - per_path(gen.nu(s.t, s.state), s.n) * sq
    return float(max(np.max(ex_f), np.max(ex_g), 0.0))


def z_lipschitz_violation(gen: GeneratorSpec, s: SampleSet, seed: int = 2) -> float:
    rng = np.random.default_rng(seed)
    z2 = s.z + rng.normal(0, 1, s.z.shape)
    diff = np.linalg.norm(gen.F(s.t, s.y, z2, s.state) - gen.F(s.t, s.y, s.z, s.state), axis=-1)
    dz = np.sqrt(np.sum((z2 - s.z) ** 2, axis=(-2, -1)))
    ex = diff - per_path(gen.ell(s.t, s.state), s.n) * dz
    return float(max(np.max(ex), 0.0))


def check_compatibility(phi: cv.ConvexSpec, psi: cv.ConvexSpec, gen: GeneratorSpec,
                        samples: SampleSet, eps_list) -> dict:
    """Sample check of the three obstacle/driver compatibility conditions.

    (i)   ``<grad phi_e(y), grad psi_e(y)> >= 0``
    (ii)  ``<grad phi_e(y), G(t, y)> <= |grad psi_e(y)| |G(t, y)|``
    (iii) ``<grad psi_e(y), F(t, y, z)> <= |grad phi_e(y)| |F(t, y, z)|``

    Returns a dict keyed by condition with ``passed`` and ``worst`` (the
    largest violation magnitude, 0 when satisfied everywhere).
    """
    if samples.n == 0:
        raise ValueError("empty sample set")
    fv = gen.F(samples.t, samples.y, samples.z, samples.state)
    gv = gen.G(samples.t, samples.y, samples.state)
    worst = {"i": 0.0, "ii": 0.0, "iii": 0.0}
    for eps in eps_list:
        gphi = cv.yosida_grad(phi, samples.y, eps)
        gpsi = cv.yosida_grad(psi, samples.y, eps)
        v1 = -np.sum(gphi * gpsi, axis=-1)
        v2 = np.sum(gphi * gv, axis=-1) - np.linalg.norm(gpsi, axis=-1) * np.linalg.norm(gv, axis=-1)
        v3 = np.sum(gpsi * fv, axis=-1) - np.linalg.norm(gphi, axis=-1) * np.linalg.norm(fv, axis=-1)
        for key, v in (("i", v1), ("ii", v2), ("iii", v3)):
            worst[key] = max(worst[key], float(np.max(v, initial=0.0)))
    # rounding slack relative to the magnitudes involved
    return {key: {"passed": w <= 1e-9 * (1.0 + np.max(np.abs(fv), initial=0.0)), "worst": w}
            for key, w in worst.items()}


# ---------------------------------------------------------------- mollifier


def _bump_profile(r2):
    r2 = np.asarray(r2, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(r2 < 1.0, np.exp(-1.0 / np.where(r2 < 1.0, 1.0 - r2, 1.0)), 0.0)


def _sphere_area(m: int) -> float:
    return 2.0 * np.pi ** (m / 2) / special.gamma(m / 2)


@lru_cache(maxsize=None)
def bump_constants(m: int) -> Tuple[float, float]:
    """``(normaliser, kappa)`` of the bump ``c * exp(-1/(1-|u|^2))`` in ``R^m``.

    ``kappa`` is the larger of ``int |grad rho|`` and ``sup |grad rho|``.
    """
    area = _sphere_area(m)
    mass = area * integrate.quad(lambda r: r ** (m - 1) * _bump_profile(r * r), 0, 1,
                                 epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    c = 1.0 / mass

    def grad_norm(r):
        return c * _bump_profile(r * r) * 2 * r / (1 - r * r) ** 2 if r < 1 else 0.0

    l1 = area * integrate.quad(lambda r: r ** (m - 1) * grad_norm(r), 0, 1,
                               epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    sup = -optimize.minimize_scalar(lambda r: -grad_norm(r), bounds=(0, 1 - 1e-9),
                                    method="bounded", options={"xatol": 1e-12}).fun
    return c, float(max(l1, sup))


def bump(u: np.ndarray) -> np.ndarray:
    """Normalised bump density on the closed unit ball; ``u`` is ``(..., m)``."""
    u = np.asarray(u, dtype=float)
    c, _ = bump_constants(u.shape[-1])
    return c * _bump_profile(np.sum(u * u, axis=-1))


@lru_cache(maxsize=None)
def _ball_rule(m: int, n: int):
    """Nodes, bump-weighted weights (sum 1) and raw mass of the ball rule."""
    c, _ = bump_constants(m)
    if m == 1:
        x, w = np.polynomial.legendre.leggauss(n)
        nodes = x[:, None]
        raw = w * bump(nodes)
    elif m == 2:
        x, w = np.polynomial.legendre.leggauss(n)
        r = 0.5 * (x + 1.0)
        wr = 0.5 * w * r
        n_theta = 2 * n
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        rr, tt = np.meshgrid(r, th, indexing="ij")
        nodes = np.stack([rr * np.cos(tt), rr * np.sin(tt)], axis=-1).reshape(-1, 2)
        raw = (wr[:, None] * (2 * np.pi / n_theta) * np.ones(n_theta)[None, :]).ravel() * bump(nodes)
    else:
        n_pow = 2 ** int(np.ceil(np.log2(max(n * n, 2))))
        pts = 2.0 * qmc.Sobol(m, scramble=False).random(n_pow) - 1.0
        pts = pts[np.sum(pts * pts, axis=1) <= 1.0]
        # antithetic copies make odd integrands vanish exactly
        nodes = np.vstack([pts, -pts])
        raw = bump(nodes) * (2.0 ** m / (2 * n_pow))
    mass = float(np.sum(raw))
    return nodes, raw / mass, mass


@dataclass(frozen=True)
class MollifierConfig:
    """Mollifier parameters.

    Parameters
    ----------
    eps : float
        Smoothing radius, ``0 < eps <= 1``.
    m : int
        State dimension.
    nodes : int
        Gauss-Legendre nodes per panel (``m = 1``), radial nodes (``m = 2``);
        for ``m >= 3`` about ``nodes**2`` Sobol points are used.
    min_nodes : int
        Smallest accepted node count.
    scan : int
        Scan points used to locate switches of the truncation indicator
        (``m = 1`` only); the rule is split at each located switch.
    panels : int
        Equal panels the interval is cut into before the switches are added
        (``m = 1`` only); limits the damage of kinks in the driver.
    """

    eps: float
    m: int = 1
    nodes: int = 48
    min_nodes: int = 8
    scan: int = 129
    panels: int = 4

    def __post_init__(self):
        if not (0 < self.eps <= 1):
            raise ValueError("mollifier eps must lie in (0, 1]")

    @property
    def kappa(self) -> float:
        return bump_constants(self.m)[1]

    def rule(self):
        """``(nodes, weights)`` of the unsplit rule."""
        nodes, w, _ = _ball_rule(self.m, self.nodes)
        return nodes, w

    def mass_error(self) -> float:
        """Deviation of the raw (unnormalised) rule mass from 1."""
        return abs(_ball_rule(self.m, self.nodes)[2] - 1.0)

    def with_eps(self, eps: float) -> "MollifierConfig":
        return replace(self, eps=eps)


def _check_cfg(cfg: MollifierConfig):
    if cfg.nodes < cfg.min_nodes:
        raise ValueError(f"mollifier needs at least {cfg.min_nodes} nodes, got {cfg.nodes}")


def _switches_1d(gate_fn, n: int, scan: int):
    """Locate switches of a boolean gate on ``[-1, 1]`` for ``n`` samples.

    ``gate_fn(u, idx)`` evaluates the gate at scalar offsets ``u`` for sample
    rows ``idx``.  Returns a list of sorted breakpoint arrays per sample.
    """
    us = np.linspace(-1.0, 1.0, scan)
    idx = np.repeat(np.arange(n), scan)
    g = gate_fn(np.tile(us, n), idx).reshape(n, scan)
    rows, cols = np.nonzero(g[:, 1:] != g[:, :-1])
    lo = us[cols].copy()
    hi = us[cols + 1].copy()
    g_lo = g[rows, cols]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        gm = gate_fn(mid, rows)
        same = gm == g_lo
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    cut = 0.5 * (lo + hi)
    out = [[-1.0] for _ in range(n)]
    for r, c in zip(rows, cut):
        out[r].append(c)
    for r in range(n):
        out[r].append(1.0)
    return out


def _integrate_ball(cfg: MollifierConfig, n: int, value_fn, gate_fn):
    """``int value(u) 1[gate(u)] rho(u) du`` for ``n`` samples.

    ``value_fn(u, idx)`` returns ``(len(idx), m)``; ``gate_fn(u, idx)``
    returns booleans; ``u`` has shape ``(len(idx), m)``.
    """
    _check_cfg(cfg)
    m = cfg.m
    if m == 1:
        breaks = _switches_1d(lambda u, idx: gate_fn(u[:, None], idx), n, cfg.scan)
        edges = np.linspace(-1.0, 1.0, cfg.panels + 1)[1:-1].tolist()
        breaks = [sorted(br + edges) for br in breaks]
        x, w = np.polynomial.legendre.leggauss(cfg.nodes)
        rows, lo, hi = [], [], []
        for r, br in enumerate(breaks):
            rows.extend([r] * (len(br) - 1))
            lo.extend(br[:-1])
            hi.extend(br[1:])
        rows = np.asarray(rows)
        lo = np.asarray(lo)
        hi = np.asarray(hi)
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        gate_mid = gate_fn(mid[:, None], rows)
        u = (mid[:, None] + half[:, None] * x[None, :]).ravel()
        idx = np.repeat(rows, len(x))
        wts = (half[:, None] * w[None, :]).ravel() * bump(u[:, None])
        wts = wts * np.repeat(gate_mid, len(x))
        vals = value_fn(u[:, None], idx)
        out = np.zeros((n, m))
        np.add.at(out, idx, wts[:, None] * vals)
        return out
    nodes, w = cfg.rule()
    q = len(nodes)
    u = np.tile(nodes, (n, 1))
    idx = np.repeat(np.arange(n), q)
    g = gate_fn(u, idx)
    vals = value_fn(u, idx) * (w[np.tile(np.arange(q), n)] * g)[:, None]
    return vals.reshape(n, q, m).sum(axis=1)


def _take_t(t, idx):
    return t if np.ndim(t) == 0 else np.asarray(t)[idx]


def _take_state(state, idx):
    return None if state is None else state.take(idx)


def mollify_F(gen: GeneratorSpec, cfg: MollifierConfig, t, y, z, state: PathState = None):
    """Mollified driver ``F_eps(t, y, z)``.

    ``F(t, y - eps u, beta_eps(z))`` is averaged against the bump over the
    unit ball, keeping only offsets where ``eps |F(t, y - eps u, 0)| <= 1``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, m = y.shape
    z = np.asarray(z, dtype=float).reshape(n, m, gen.k)
    zb = beta_trunc(z, cfg.eps)
    eps = cfg.eps
    zeros = np.zeros((1, m, gen.k))

    def gate_fn(u, idx):
        f0 = gen.F(_take_t(t, idx), y[idx] - eps * u, np.broadcast_to(zeros, (len(idx), m, gen.k)),
                   _take_state(state, idx))
        return eps * np.linalg.norm(f0, axis=-1) <= 1.0

    def value_fn(u, idx):
        return gen.F(_take_t(t, idx), y[idx] - eps * u, zb[idx], _take_state(state, idx))

    return _integrate_ball(cfg, n, value_fn, gate_fn)


def mollify_G(gen: GeneratorSpec, cfg: MollifierConfig, t, y, state: PathState = None):
    """Mollified driver ``G_eps(t, y)``, same construction as :func:`mollify_F`."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, m = y.shape
    eps = cfg.eps

    def gate_fn(u, idx):
        g0 = gen.G(_take_t(t, idx), y[idx] - eps * u, _take_state(state, idx))
        return eps * np.linalg.norm(g0, axis=-1) <= 1.0

    def value_fn(u, idx):
        return gen.G(_take_t(t, idx), y[idx] - eps * u, _take_state(state, idx))

    return _integrate_ball(cfg, n, value_fn, gate_fn)


def mollified(gen: GeneratorSpec, cfg: MollifierConfig) -> GeneratorSpec:
    """Generator whose drivers are the mollified ``F_eps`` and ``G_eps``."""

    def F(t, y, z, state=None):
        return mollify_F(gen, cfg, t, y, z, state)

    def G(t, y, state=None):
        return mollify_G(gen, cfg, t, y, state)

    return GeneratorSpec(F, G, gen.mu, gen.nu, gen.ell, gen.tag + "~moll", gen.params,
                         gen.m, gen.k, True, None)


# ---------------------------------------------------------------- mollifier suite


def _sharp_F(gen: GeneratorSpec, r: np.ndarray, t, state: PathState) -> np.ndarray:
    """``sup_{|y|<=r} |F(t, y, 0)|`` per sample (``r`` an array)."""
    r = np.asarray(r, dtype=float)
    if gen.sharp is not None:
        return per_path(gen.sharp(r, t, state)[0], len(r))
    out = np.empty(len(r))
    for j in range(len(r)):
        st = None if state is None else state.take(np.array([j]))
        tj = t if np.ndim(t) == 0 else np.asarray(t)[j:j + 1]
        out[j] = np.asarray(sharp_bound(gen, float(r[j]), tj, st)[0]).ravel()[0]
    return out


def mollifier_catalog() -> list:
    """Drivers exercised by :func:`mollifier_suite`."""
    return [linear(rho=1.0, drift=0.5, g_rho=0.5, g_drift=-0.25), cubic_monotone(), example_a6()]


def mollifier_suite(gen: GeneratorSpec, n: int = 1000, seed: int = 0, nodes: int = 48,
                    tol: float = 1e-6, eps_values=(0.05, 0.1, 0.25, 0.5, 1.0),
                    p: float = 2.0, lam: float = 0.5) -> dict:
    """Randomized check of the mollifier bounds for one driver.

    Every check reports the largest excess of the left side over its
    analytic bound; it passes when the excess is at most ``tol``.  ``dense``
    compares the default rule with one using ten times the nodes.
    """
    if gen.m != 1:
        raise ValueError("mollifier suite samples scalar states only")
    rng = np.random.default_rng(seed)
    s = random_samples(gen, n, seed=seed)
    y, z, t, st = s.y, s.z, s.t, s.state
    y_hat = rng.uniform(-2.0, 2.0, y.shape)
    z_hat = z + rng.normal(0.0, 1.0, z.shape)
    eps = rng.choice(np.asarray(eps_values, dtype=float), n)
    delta = rng.choice(np.asarray(eps_values, dtype=float), n)
    mu = per_path(gen.mu(t, st), n)
    ell = per_path(gen.ell(t, st), n)
    n_p = min(p - 1.0, 1.0)

    def norm(a):
        return np.sqrt(np.sum(a.reshape(len(a), -1) ** 2, axis=1))

    def moll(e_arr, yy, zz, node_count=nodes):
        out = np.zeros((n, gen.m))
        for e in np.unique(e_arr):
            idx = np.nonzero(e_arr == e)[0]
            cfg = MollifierConfig(float(e), gen.m, node_count)
            out[idx] = mollify_F(gen, cfg, t[idx], yy[idx], zz[idx], st.take(idx))
        return out

    def moll_G(e_arr, yy, node_count=nodes):
        out = np.zeros((n, gen.m))
        for e in np.unique(e_arr):
            idx = np.nonzero(e_arr == e)[0]
            cfg = MollifierConfig(float(e), gen.m, node_count)
            out[idx] = mollify_G(gen, cfg, t[idx], yy[idx], st.take(idx))
        return out

    kappa = bump_constants(gen.m)[1]
    beta_norm = np.array([norm(beta_trunc(z[j:j + 1], e))[0] for j, e in enumerate(eps)])
    f = moll(eps, y, z)
    f_zhat = moll(eps, y, z_hat)
    f_yhat = moll(eps, y_hat, z)
    f_origin = moll(eps, np.zeros_like(y), np.zeros_like(z))
    g = moll_G(eps, y)
    dy = norm(y - y_hat)
    excess = {
        "bound_a": norm(f) - (ell * beta_norm + 1.0 / eps),
        "bound_a_G": norm(g) - 1.0 / eps,
        "lipschitz_z": norm(f - f_zhat) - ell * norm(z - z_hat),
        "lipschitz_y": norm(f - f_yhat) - kappa / eps * (ell * beta_norm + 1.0 / eps) * dy,
        "origin": norm(f_origin) - _sharp_F(gen, np.ones(n), t, st),
        "growth": norm(f) - (ell * norm(z) + _sharp_F(gen, norm(y) + 1.0, t, st)),
    }
    # monotonicity transfer, rho = |y_hat|
    sharp_hat = _sharp_F(gen, norm(y_hat) + 1.0, t, st)
    zflag = (norm(z) > 0).astype(float)
    rhs = (dy * sharp_hat + np.maximum(mu + ell ** 2 / (2 * n_p * lam) * zflag, 0.0) * dy ** 2
           + 0.5 * n_p * lam * norm(z) ** 2)
    excess["transfer"] = np.sum((y - y_hat) * f, axis=-1) - rhs
    # two-parameter bound, rho = max(|y|, |y_hat|)
    f_delta = moll(delta, y_hat, z_hat)
    rho = np.maximum(norm(y), norm(y_hat))
    sh = _sharp_F(gen, rho + 1.0, t, st)
    de = np.abs(eps - delta)
    mup = np.maximum(mu, 0.0)
    lo = np.minimum(1.0 / eps, 1.0 / delta)
    nz_hat = norm(z_hat)
    rhs2 = (de * (mup * de + 2 * sh + 2 * ell * norm(z))
            + dy * (2 * mup * de + ell * nz_hat * (nz_hat >= lo) * (eps != delta)
                    + (sh + ell * nz_hat) * (sh >= lo))
            + (mup + ell ** 2 / (2 * n_p * lam) * (norm(z - z_hat) > 0)) * dy ** 2
            + 0.5 * n_p * lam * norm(z - z_hat) ** 2)
    excess["two_eps"] = np.sum((y - y_hat) * (f - f_delta), axis=-1) - rhs2
    excess["dense"] = np.maximum(norm(f - moll(eps, y, z, 10 * nodes)),
                                 norm(g - moll_G(eps, y, 10 * nodes)))
    checks = {}
    for name, ex in excess.items():
        j = int(np.argmax(ex))
        checks[name] = {"worst": float(ex[j]), "passed": bool(ex[j] <= tol),
                        "sample": {"t": float(t[j]), "y": y[j].tolist(), "y_hat": y_hat[j].tolist(),
                                   "z": z[j].ravel().tolist(), "eps": float(eps[j])}}
    return {"generator": gen.label(), "n": n, "tol": tol,
            "passed": all(c["passed"] for c in checks.values()), "checks": checks}
