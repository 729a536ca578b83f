"""Convex functions with exact proximal maps.

Each :class:`ConvexSpec` describes a proper, lower semicontinuous convex
function ``f : R^m -> [0, inf]`` with ``f(0) = 0``.  All operations are
vectorised: a point is an array whose trailing axis has length ``dim``.  For
one-dimensional specs a plain scalar or an array without the trailing axis is
accepted as well, and results come back in the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

KINDS = ("zero", "interval", "quadratic", "abspower", "maxzero", "product")

# Newton iterations for AbsPower exponents without a closed-form root.
_NEWTON_ITERS = 60


class ConvexDomainError(ValueError):
    """Raised for non-finite inputs or invalid smoothing parameters."""


@dataclass(frozen=True)
class ConvexSpec:
    """A convex function from the built-in catalog.

    Parameters
    ----------
    kind : str
        One of ``zero``, ``interval``, ``quadratic``, ``abspower``,
        ``maxzero`` or ``product``.
    dim : int
        Dimension of the argument.
    lo, hi : float
        Interval endpoints (``interval`` only); may be infinite.
    scale : float
        Curvature of ``quadratic``: ``f(y) = scale * |y|^2 / 2``.
    exponent : float
        Power of ``abspower``: ``f(y) = |y|^exponent``.
    parts : tuple of ConvexSpec
        Blocks of a separable ``product``.
    """

    kind: str
    dim: int = 1
    lo: float = -np.inf
    hi: float = np.inf
    scale: float = 1.0
    exponent: float = 2.0
    parts: Tuple["ConvexSpec", ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown convex kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if self.kind in ("interval", "maxzero") and self.dim != 1:
            raise ValueError(f"{self.kind} requires dim == 1")
        if self.kind == "interval":
            if np.isnan(self.lo) or np.isnan(self.hi):
                raise ValueError("interval endpoints must not be NaN")
            if not (self.lo <= 0.0 <= self.hi):
                raise ValueError(
                    f"interval [{self.lo}, {self.hi}] must contain 0 so that f(0) = 0"
                )
        if self.kind == "quadratic" and not self.scale > 0:
            raise ValueError("quadratic scale must be positive")
        if self.kind == "abspower" and not self.exponent >= 1:
            raise ValueError("abspower exponent must be >= 1")
        if self.kind == "product":
            if not self.parts:
                raise ValueError("product needs at least one part")
            if sum(p.dim for p in self.parts) != self.dim:
                raise ValueError("product dim must equal the sum of part dims")

    def label(self) -> str:
        """Short text form, round-trips through :func:`parse_convex`."""
        if self.kind == "zero":
            return "zero" if self.dim == 1 else f"zero(dim={self.dim})"
        if self.kind == "interval":
            return f"interval({_fmt(self.lo)}, {_fmt(self.hi)})"
        if self.kind == "quadratic":
            return f"quadratic({_fmt(self.scale)})" + ("" if self.dim == 1 else f"^{self.dim}")
        if self.kind == "abspower":
            return f"abspower({_fmt(self.exponent)})" + ("" if self.dim == 1 else f"^{self.dim}")
        if self.kind == "maxzero":
            return "maxzero"
        return "product(" + "; ".join(p.label() for p in self.parts) + ")"


def _fmt(x: float) -> str:
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


# ---------------------------------------------------------------- constructors


def zero(dim: int = 1) -> ConvexSpec:
    return ConvexSpec("zero", dim)


def interval(lo: float, hi: float) -> ConvexSpec:
    """Indicator of ``[lo, hi]``; either endpoint may be infinite."""
    return ConvexSpec("interval", 1, lo=float(lo), hi=float(hi))


def quadratic(scale: float = 1.0, dim: int = 1) -> ConvexSpec:
    return ConvexSpec("quadratic", dim, scale=float(scale))


def abspower(exponent: float, dim: int = 1) -> ConvexSpec:
    return ConvexSpec("abspower", dim, exponent=float(exponent))


def maxzero() -> ConvexSpec:
    return ConvexSpec("maxzero", 1)


def product(*parts: ConvexSpec) -> ConvexSpec:
    return ConvexSpec("product", sum(p.dim for p in parts), parts=tuple(parts))


def parse_convex(text: str) -> ConvexSpec:
    """Parse the short text form used in run configs.

    Examples: ``zero``, ``interval(0, inf)``, ``quadratic(2)``,
    ``abspower(1.5)``, ``maxzero``, ``product(interval(-1, 1); zero)``.
    A ``^m`` suffix sets the dimension of ``zero``/``quadratic``/``abspower``.
    """
    s = text.strip().lower().replace(" ", "")
    dim = 1
    if s.startswith("product(") and s.endswith(")"):
        inner = s[len("product("):-1]
        return product(*(parse_convex(p) for p in _split_top(inner, ";")))
    if "^" in s:
        s, d = s.rsplit("^", 1)
        dim = int(d)
    if s == "zero":
        return zero(dim)
    if s.startswith("zero(dim=") and s.endswith(")"):
        return zero(int(s[len("zero(dim="):-1]))
    if s == "maxzero":
        return maxzero()
    if "(" in s and s.endswith(")"):
        name, args = s[:-1].split("(", 1)
        vals = [float(v) for v in args.split(",") if v]
        if name == "interval" and len(vals) == 2:
            return interval(*vals)
        if name == "quadratic" and len(vals) == 1:
            return quadratic(vals[0], dim)
        if name == "abspower" and len(vals) == 1:
            return abspower(vals[0], dim)
    raise ValueError(f"cannot parse convex spec {text!r}")


def _split_top(s: str, sep: str):
    out, depth, cur = [], 0, ""
    for ch in s:
        depth += ch == "("
        depth -= ch == ")"
        if ch == sep and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return out


# ---------------------------------------------------------------- array plumbing


def _points(spec: ConvexSpec, y):
    """Return ``(array with trailing dim axis, squeeze flag)``."""
    arr = np.asarray(y, dtype=float)
    if spec.dim == 1 and (arr.ndim == 0 or arr.shape[-1] != 1):
        return arr[..., None], True
    if arr.ndim == 0 or arr.shape[-1] != spec.dim:
        raise ConvexDomainError(
            f"point has trailing size {arr.shape[-1] if arr.ndim else 0}, expected {spec.dim}"
        )
    return arr, False


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise ConvexDomainError("non-finite input point")


def _check_eps(eps):
    e = np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(e)) or np.any(e <= 0):
        raise ConvexDomainError("eps must be positive and finite")
    return e


# ---------------------------------------------------------------- value


def _value(spec: ConvexSpec, y: np.ndarray) -> np.ndarray:
    k = spec.kind
    if k == "zero":
        return np.zeros(y.shape[:-1])
    if k == "interval":
        x = y[..., 0]
        return np.where((x >= spec.lo) & (x <= spec.hi), 0.0, np.inf)
    if k == "quadratic":
        return 0.5 * spec.scale * np.sum(y * y, axis=-1)
    if k == "abspower":
        return np.linalg.norm(y, axis=-1) ** spec.exponent
    if k == "maxzero":
        return np.maximum(y[..., 0], 0.0)
    out = np.zeros(y.shape[:-1])
    start = 0
    for part in spec.parts:
        out = out + _value(part, y[..., start:start + part.dim])
        start += part.dim
    return out


def value(spec: ConvexSpec, y) -> np.ndarray:
    """Evaluate ``f(y)``; returns ``inf`` outside the effective domain."""
    arr, _ = _points(spec, y)
    if np.any(np.isnan(arr)):
        raise ConvexDomainError("NaN input point")
    out = _value(spec, arr)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- prox


def _radial_root(x: np.ndarray, eps: np.ndarray, r: float) -> np.ndarray:
    """Solve ``s + eps * r * s**(r - 1) = x`` for ``s >= 0`` given ``x >= 0``."""
    if r == 1.0:
        return np.maximum(x - eps, 0.0)
    if r == 2.0:
        return x / (1.0 + 2.0 * eps)
    if r == 1.5:
        c = 0.75 * eps
        return (np.sqrt(c * c + x) - c) ** 2
    if r == 3.0:
        d = 6.0 * eps
        # rationalised root of 3*eps*s^2 + s - x = 0, stable for small eps*x
        return 2.0 * x / (1.0 + np.sqrt(1.0 + 2.0 * d * x))
    # general exponent: safeguarded Newton on g(s) = s + eps*r*s^(r-1) - x,
    # started from the upper bound s = x where g >= 0; g is increasing and
    # convex for r >= 2 (concave in s^(r-1) for 1 < r < 2 handled by bisection).
    lo = np.zeros_like(x)
    hi = x.copy()
    s = x.copy()
    for _ in range(_NEWTON_ITERS):
        g = s + eps * r * s ** (r - 1.0) - x
        lo = np.where(g < 0, s, lo)
        hi = np.where(g >= 0, s, hi)
        dg = 1.0 + eps * r * (r - 1.0) * np.where(s > 0, s, 1.0) ** (r - 2.0)
        step = s - g / dg
        inside = (step > lo) & (step < hi)
        s = np.where(inside, step, 0.5 * (lo + hi))
    return s


def _prox(spec: ConvexSpec, y: np.ndarray, eps: np.ndarray) -> np.ndarray:
    k = spec.kind
    e = eps[..., None]
    if k == "zero":
        return y.copy()
    if k == "interval":
        return np.clip(y, spec.lo, spec.hi)
    if k == "quadratic":
        return y / (1.0 + spec.scale * e)
    if k == "maxzero":
        x = y[..., 0]
        ee = np.broadcast_to(eps, x.shape)
        out = np.where(x > ee, x - ee, np.where(x >= 0, 0.0, x))
        return out[..., None]
    if k == "abspower":
        norm = np.linalg.norm(y, axis=-1)
        s = _radial_root(norm, np.broadcast_to(eps, norm.shape).astype(float), spec.exponent)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(norm > 0, s / np.where(norm > 0, norm, 1.0), 0.0)
        return y * ratio[..., None]
    pieces = []
    start = 0
    for part in spec.parts:
        pieces.append(_prox(part, y[..., start:start + part.dim], eps))
        start += part.dim
    return np.concatenate(pieces, axis=-1)


def prox(spec: ConvexSpec, y, eps) -> np.ndarray:
    """Resolvent ``J_eps(y) = argmin_v |y - v|^2 / (2 eps) + f(v)``.

    Parameters
    ----------
    spec : ConvexSpec
    y : array_like
        Points, trailing axis of length ``spec.dim``.
    eps : float or array_like
        Smoothing parameter, broadcast against the point axes.
    """
    arr, squeeze = _points(spec, y)
    _check_finite(arr)
    e = np.broadcast_to(_check_eps(eps), arr.shape[:-1])
    out = _prox(spec, arr, e)
    return out[..., 0] if squeeze else out


@dataclass(frozen=True)
class MoreauOutput:
    """Moreau envelope, resolvent and Yosida gradient at a point."""

    envelope: np.ndarray
    resolvent: np.ndarray
    gradient: np.ndarray
    epsilon: float


def moreau(spec: ConvexSpec, y, eps) -> MoreauOutput:
    """Envelope, resolvent and gradient in one pass."""
    arr, squeeze = _points(spec, y)
    _check_finite(arr)
    e = np.broadcast_to(_check_eps(eps), arr.shape[:-1])
    j = _prox(spec, arr, e)
    diff = arr - j
    grad = diff / e[..., None]
    env = np.sum(diff * diff, axis=-1) / (2.0 * e) + _value(spec, j)
    if squeeze:
        j, grad = j[..., 0], grad[..., 0]
    if env.ndim == 0:
        env = float(env)
    return MoreauOutput(env, j, grad, eps)


def yosida_grad(spec: ConvexSpec, y, eps) -> np.ndarray:
    """Gradient of the Moreau envelope, ``(y - J_eps(y)) / eps``."""
    arr, squeeze = _points(spec, y)
    _check_finite(arr)
    e = np.broadcast_to(_check_eps(eps), arr.shape[:-1])
    g = (arr - _prox(spec, arr, e)) / e[..., None]
    return g[..., 0] if squeeze else g


def envelope(spec: ConvexSpec, y, eps) -> np.ndarray:
    return moreau(spec, y, eps).envelope


def penalty_resolvent(spec: ConvexSpec, x, eps, lam) -> np.ndarray:
    """Solve ``y + lam * grad f_eps(y) = x`` in closed form.

    Uses ``y = (eps * x + lam * J_{eps + lam}(x)) / (eps + lam)``; ``lam`` may
    be an array (zero entries return ``x`` unchanged).
    """
    arr, squeeze = _points(spec, x)
    _check_finite(arr)
    e = np.broadcast_to(_check_eps(eps), arr.shape[:-1])
    lam = np.broadcast_to(np.asarray(lam, dtype=float), arr.shape[:-1])
    if np.any(lam < 0):
        raise ConvexDomainError("lam must be nonnegative")
    w = _prox(spec, arr, e + lam)
    out = (e[..., None] * arr + lam[..., None] * w) / (e + lam)[..., None]
    return out[..., 0] if squeeze else out


def cross_yosida_residual(spec: ConvexSpec, u, eps_a, v, eps_b) -> np.ndarray:
    """Left minus right side of the two-parameter Yosida inequality.

    Returns ``-<u - v, g_a(u) - g_b(v)> - (eps_a + eps_b) <g_a(u), g_b(v)>``
    where ``g_e`` is the Yosida gradient at parameter ``e``.  The result is
    never positive.
    """
    ua, sq_u = _points(spec, u)
    va, sq_v = _points(spec, v)
    if ua.shape[-1] != va.shape[-1]:
        raise ConvexDomainError("dimension mismatch between u and v")
    ga = yosida_grad(spec, ua, eps_a)
    gb = yosida_grad(spec, va, eps_b)
    ea = np.asarray(eps_a, dtype=float)
    eb = np.asarray(eps_b, dtype=float)
    out = -np.sum((ua - va) * (ga - gb), axis=-1) - (ea + eb) * np.sum(ga * gb, axis=-1)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------- property suite


def catalog() -> list:
    """Obstacles exercised by :func:`property_suite`."""
    return [
        zero(), zero(2), interval(-1.0, 1.0), interval(0.0, np.inf), interval(-np.inf, 0.5),
        quadratic(2.0), quadratic(0.5, 2), abspower(1.0), abspower(1.5), abspower(2.0),
        abspower(3.0), abspower(1.5, 2), maxzero(), product(interval(-1.0, 1.0), quadratic(1.0)),
    ]


def property_suite(specs=None, n: int = 10_000, eps=None, seed: int = 0, y_scale: float = 4.0,
                   tol: float = 1e-12, prox_fn=None) -> list:
    """Randomized check of the resolvent and envelope inequalities.

    For each spec, ``n`` triples ``(u, v, eps)`` are drawn (``eps``
    log-uniform on ``[0.1, 10]`` unless a fixed value is given) and the
    following residuals are formed, each of which must not exceed ``tol``:

    ``nonexpansive``  ``|J(u) - J(v)| - |u - v|``
    ``lipschitz``     ``|g(u) - g(v)| - |u - v| / eps``
    ``envelope``      ``|f_eps(u) - |u - J(u)|^2 / (2 eps) - f(J(u))|`` plus the
                      excess of ``f_eps(u)`` over ``|u - w|^2 / (2 eps) + f(w)`` at a
                      random competitor ``w`` inside the domain
    ``cauchy``        :func:`cross_yosida_residual` with a second random ``eps``
    ``sandwich``      violations of ``0 <= f(J(u)) <= f_eps(u) <= f(u)``, of the
                      origin identities and of monotonicity in ``eps``

    ``prox_fn`` replaces :func:`prox` (used to inject faults).  Returns one
    dict per spec with the worst residual per check and the offending sample.
    """
    specs = catalog() if specs is None else list(specs)
    J = prox if prox_fn is None else prox_fn
    rng = np.random.default_rng(seed)
    rows = []
    for spec in specs:
        d = spec.dim
        u = rng.uniform(-y_scale, y_scale, (n, d))
        v = rng.uniform(-y_scale, y_scale, (n, d))
        if eps is None:
            e1 = np.exp(rng.uniform(np.log(0.1), np.log(10.0), n))
            e2 = np.exp(rng.uniform(np.log(0.1), np.log(10.0), n))
        else:
            e1 = np.full(n, float(eps))
            e2 = e1 * np.exp(rng.uniform(-1.0, 1.0, n))
        ju, jv = J(spec, u, e1), J(spec, v, e1)
        gu, gv = (u - ju) / e1[:, None], (v - jv) / e1[:, None]
        fu, fj = _value(spec, u), _value(spec, ju)
        env = np.sum((u - ju) ** 2, axis=-1) / (2 * e1) + fj
        out = moreau(spec, u, e1)
        w = prox(spec, v, 1e-3)  # competitor inside the domain
        res = {
            "nonexpansive": np.linalg.norm(ju - jv, axis=-1) - np.linalg.norm(u - v, axis=-1),
            "lipschitz": np.linalg.norm(gu - gv, axis=-1) - np.linalg.norm(u - v, axis=-1) / e1,
            "envelope": np.maximum(
                np.abs(out.envelope - env),
                env - (np.sum((u - w) ** 2, axis=-1) / (2 * e1) + _value(spec, w))),
            "cauchy": -np.sum((u - v) * (gu - (v - J(spec, v, e2)) / e2[:, None]), axis=-1)
                      - (e1 + e2) * np.sum(gu * (v - J(spec, v, e2)) / e2[:, None], axis=-1),
        }
        e_big = np.maximum(e1, e2)
        e_small = np.minimum(e1, e2)
        env_big = envelope(spec, u, e_big)
        env_small = envelope(spec, u, e_small)
        zero_pt = np.zeros((1, d))
        origin = max(float(np.max(np.abs(J(spec, zero_pt, e1[:1])))),
                     float(np.max(np.abs(yosida_grad(spec, zero_pt, e1[:1])))),
                     abs(float(np.asarray(envelope(spec, zero_pt, e1[:1])).ravel()[0])))
        with np.errstate(invalid="ignore"):
            sandwich = np.maximum.reduce([
                -fj, fj - env, np.where(np.isfinite(fu), env - fu, 0.0),
                env_big - env_small, np.where(np.isfinite(fu), env_small - fu, 0.0),
            ])
        res["sandwich"] = np.maximum(sandwich, origin)
        row = {"spec": spec.label(), "passed": True, "checks": {}}
        for name, r in res.items():
            r = np.where(np.isnan(r), np.inf, r)
            j = int(np.argmax(r))
            worst = float(r[j])
            ok = worst <= tol
            row["checks"][name] = {"worst": worst, "passed": ok,
                                   "sample": {"u": u[j].tolist(), "v": v[j].tolist(),
                                              "eps": float(e1[j]), "eps2": float(e2[j])}}
            row["passed"] = row["passed"] and ok
        rows.append(row)
    return rows
