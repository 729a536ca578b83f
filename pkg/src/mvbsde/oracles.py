"""Reference solutions: a recombining binomial tree and linear closed forms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.stats import binom

from . import convex as cv
from .driving import PathEnsemble, Terminal
from .generators import GeneratorSpec, PathState


@dataclass(frozen=True)
class TreeConfig:
    """Binomial tree with increments ``+-sqrt(dt)``, probability 1/2 each."""

    steps: int = 512
    T: float = 1.0

    def __post_init__(self):
        if self.steps < 1 or not self.T > 0:
            raise ValueError("steps and T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.steps


@dataclass
class TreeSolution:
    """Per-level node arrays; level ``n`` has ``n + 1`` nodes.

    ``dK[n]`` is the push applied at level ``n`` (projected minus
    pre-projection value); ``K[n]`` is the expected cumulative push before
    level ``n`` conditional on reaching each node (``K[0] = 0``).
    """

    cfg: TreeConfig
    b: List[np.ndarray]
    Y: List[np.ndarray]
    Z: List[np.ndarray]
    dK: List[np.ndarray]
    K: List[np.ndarray]

    @property
    def root(self) -> float:
        return float(self.Y[0][0])

    def expected_K_T(self) -> float:
        n = self.cfg.steps
        probs = binom.pmf(np.arange(n + 1), n, 0.5)
        return float(np.sum(probs * self.K[n]))


def tree_project(phi: cv.ConvexSpec, y: np.ndarray) -> np.ndarray:
    """Exact projection onto the closed domain of an indicator (or identity)."""
    if phi.kind == "zero":
        return np.asarray(y, dtype=float).copy()
    return np.clip(y, phi.lo, phi.hi)


def tree_solve(cfg: TreeConfig, gen: GeneratorSpec, phi: cv.ConvexSpec, eta: Terminal) -> TreeSolution:
    """Reflected dynamic program on the binomial tree.

    ``Y = proj(E[Y_next] + F(t, E[Y_next], Z) dt)``, ``Z = (Y_up - Y_down) / (2 sqrt(dt))``.
    """
    if gen.m != 1 or gen.k != 1:
        raise ValueError("tree oracle supports m = k = 1 only")
    if phi.kind not in ("zero", "interval"):
        raise ValueError(f"tree oracle does not support obstacle kind {phi.kind!r}")
    n_steps = cfg.steps
    dt = cfg.dt
    sq = np.sqrt(dt)
    b = [(2.0 * np.arange(n + 1) - n) * sq for n in range(n_steps + 1)]
    Y = [None] * (n_steps + 1)
    Z = [np.zeros(0)] * (n_steps + 1)
    dK = [np.zeros(n + 1) for n in range(n_steps + 1)]
    last = tree_project(phi, eta.apply(b[n_steps]))
    dK[n_steps] = last - eta.apply(b[n_steps])
    Y[n_steps] = last
    for n in range(n_steps - 1, -1, -1):
        up = Y[n + 1][1:]
        down = Y[n + 1][:-1]
        mean = 0.5 * (up + down)
        z = (up - down) / (2.0 * sq)
        st = PathState(b[n][:, None], np.zeros(n + 1), n)
        drive = gen.F(n * dt, mean[:, None], z[:, None, None], st)[:, 0]
        pre = mean + drive * dt
        Y[n] = tree_project(phi, pre)
        Z[n] = z
        dK[n] = Y[n] - pre
    # forward pass: expected cumulative push given the node
    K = [np.zeros(1)]
    for n in range(n_steps):
        prev = K[n] + dK[n]
        j = np.arange(n + 2)
        from_down = np.where(j >= 1, prev[np.clip(j - 1, 0, n)], 0.0)
        from_up = np.where(j <= n, prev[np.clip(j, 0, n)], 0.0)
        K.append((j * from_down + (n + 1 - j) * from_up) / (n + 1))
    return TreeSolution(cfg, b, Y, Z, dK, K)


def tree_rows(sol: TreeSolution):
    header = ["level", "node", "Y", "Z", "K"]
    rows = []
    for n in range(sol.cfg.steps + 1):
        for j in range(n + 1):
            z = sol.Z[n][j] if n < sol.cfg.steps else 0.0
            rows.append([n, j, repr(float(sol.Y[n][j])), repr(float(z)), repr(float(sol.K[n][j]))])
    return header, rows


def write_tree_csv(sol: TreeSolution, path, comments=()):
    header, rows = tree_rows(sol)
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def linear_closed_form(rho: float, eta: Terminal, t, b, T: float = 1.0) -> np.ndarray:
    """``Y_t = exp(-rho (T - t)) E_t[eta]`` for ``F = -rho y``, no obstacle.

    ``t`` and ``b`` (the Brownian value) broadcast against each other.
    """
    t = np.asarray(t, dtype=float)
    b = np.asarray(b, dtype=float)
    if eta.kind == "constant":
        cond = np.full(np.broadcast(t, b).shape, eta.value)
    elif eta.kind == "brownian":
        cond = eta.shift + eta.scale * b + 0.0 * t
    elif eta.kind == "square":
        cond = eta.shift + eta.scale * (b * b + (T - t))
    else:
        raise ValueError(f"no closed form for terminal {eta.label()}")
    return np.exp(-rho * (T - t)) * cond


def linear_on_ensemble(rho: float, eta: Terminal, ens: PathEnsemble) -> np.ndarray:
    """Closed form evaluated on every ``(path, node)`` of a fixed-horizon ensemble."""
    if ens.cfg.exit_level is not None:
        raise ValueError("closed form needs a fixed horizon")
    return linear_closed_form(rho, eta, ens.t[None, :], ens.B[:, :, 0], ens.cfg.T)
