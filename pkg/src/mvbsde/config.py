"""Plain-text run configuration with dotted keys.

One ``section.key = value`` assignment per line; ``#`` starts a comment.
Every key has a default and the parsed result is rendered back into a
canonical text that is echoed into all outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import convex as cv
from . import generators as gl
from .driving import Clock, GridConfig, Terminal
from .engine import Problem, SolverOptions

# key -> (kind, default text); kinds: float, int, str, floats, ints, strs, optfloat
SCHEMA: Dict[str, tuple] = {
    "problem.generator": ("str", "linear"),
    "problem.rho": ("float", "1.0"),
    "problem.drift": ("float", "0.0"),
    "problem.g_rho": ("float", "0.0"),
    "problem.g_drift": ("float", "0.0"),
    "problem.phi": ("str", "zero"),
    "problem.psi": ("str", "zero"),
    "problem.terminal": ("str", "constant"),
    "problem.terminal_value": ("float", "1.0"),
    "problem.terminal_scale": ("float", "1.0"),
    "problem.terminal_shift": ("float", "0.0"),
    "problem.terminal_lo": ("float", "-1.0"),
    "problem.terminal_hi": ("float", "1.0"),
    "problem.clock": ("str", "none"),
    "problem.clock_scale": ("float", "0.0"),
    "problem.clock_integrand": ("str", "abs"),
    "problem.horizon": ("float", "1.0"),
    "problem.exit_level": ("optfloat", "none"),
    "problem.p": ("float", "2.0"),
    "problem.lambda": ("float", "0.5"),
    "numerics.steps": ("int", "100"),
    "numerics.paths": ("int", "20000"),
    "numerics.seed": ("int", "0"),
    "numerics.eps": ("floats", "0.4, 0.2, 0.1, 0.05"),
    "numerics.tol": ("float", "0.1"),
    "numerics.degree": ("int", "3"),
    "numerics.penalty": ("str", "implicit"),
    "numerics.mollify": ("str", "auto"),
    "numerics.quad_nodes": ("int", "48"),
    "numerics.tree_steps": ("int", "512"),
    "numerics.oracle_tol": ("float", "0.005"),
    "checks.run": ("strs", "def1, terminal, apriori, ito"),
    "checks.p_values": ("floats", "1.5, 2"),
    "checks.deltas": ("floats", "0.01, 0.5"),
    "checks.constants": ("floats", "0, 0.5"),
    "checks.smooth_eps": ("float", "0.1"),
    "checks.anchor": ("float", "0.5"),
    "checks.windows": ("strs", "full, second_half"),
    "checks.seeds": ("ints", "1, 2"),
    "checks.shifts": ("floats", "0.2, 0.1, 0.05"),
    "checks.ito_p": ("floats", "1.5, 2"),
    "checks.ito_delta": ("floats", "0.01, 0"),
    "smoothing.eps_list": ("floats", "0.2, 0.1, 0.05"),
    "output.max_paths": ("int", "50"),
}

GENERATORS = ("linear", "zero", "cubic", "example_a6")
CHECKS = ("def1", "terminal", "apriori", "ito", "uniqueness", "continuity")


class ConfigError(ValueError):
    """Parse or validation error, with the offending line when known."""

    def __init__(self, msg: str, line: Optional[int] = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)
        self.line = line


def _convert(kind: str, text: str):
    text = text.strip()
    if kind == "float":
        return float(text)
    if kind == "int":
        return int(text)
    if kind == "str":
        if not text:
            raise ValueError("empty value")
        return text
    if kind == "optfloat":
        return None if text.lower() == "none" else float(text)
    items = [s.strip() for s in text.split(",") if s.strip()]
    if kind == "floats":
        return [float(s) for s in items]
    if kind == "ints":
        return [int(s) for s in items]
    return items


@dataclass
class RunConfig:
    """Resolved configuration: typed values plus the canonical echo text."""

    values: Dict[str, object]
    source: str = "<defaults>"

    def __getitem__(self, key):
        return self.values[key]

    def text(self) -> str:
        """Canonical ``key = value`` lines, sorted by key."""
        return "\n".join(f"{k} = {_render(self.values[k])}" for k in sorted(self.values)) + "\n"

    def with_values(self, **updates) -> "RunConfig":
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals, self.source)


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, list):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse config text; unknown keys, duplicates and bad values are errors."""
    raw = {k: d for k, (_, d) in SCHEMA.items()}
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'section.key = value'", lineno, source)
        key, val = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno, source)
        seen[key] = lineno
        try:
            _convert(SCHEMA[key][0], val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, source) from None
        raw[key] = val
    values = {k: _convert(SCHEMA[k][0], v) for k, v in raw.items()}
    cfg = RunConfig(values, source)
    try:
        _validate(cfg)
    except ValueError as exc:
        key = str(exc).split(":", 1)[0]
        raise ConfigError(str(exc), seen.get(key), source) from None
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def default_config() -> RunConfig:
    return parse_config("", "<defaults>")


def _validate(cfg: RunConfig):
    if cfg["problem.generator"] not in GENERATORS:
        raise ValueError(f"problem.generator: expected one of {', '.join(GENERATORS)}")
    for key in ("problem.phi", "problem.psi"):
        try:
            cv.parse_convex(cfg[key])
        except ValueError as exc:
            raise ValueError(f"{key}: {exc}") from None
    for key in cfg["checks.run"]:
        if key not in CHECKS:
            raise ValueError(f"checks.run: unknown check {key!r}")
    if cfg["numerics.penalty"] not in ("explicit", "implicit"):
        raise ValueError("numerics.penalty: expected explicit or implicit")
    if len(cfg["checks.ito_p"]) != len(cfg["checks.ito_delta"]):
        raise ValueError("checks.ito_delta: needs one entry per checks.ito_p entry")
    for w in cfg["checks.windows"]:
        if w not in ("full", "first_half", "second_half"):
            raise ValueError(f"checks.windows: unknown window {w!r}")
    build_grid(cfg)
    problem = build_problem(cfg)
    build_options(cfg)
    _check_random_horizon(cfg, problem)


def _check_random_horizon(cfg: RunConfig, problem: Problem):
    """Reject exit-time runs with ``q < 2`` whose terminal leaves the zero set of Psi.

    With a random horizon and ``q < 2`` the a-priori theory needs
    ``Psi(eta) = 0``; ``eta`` is probed over a wide range of Brownian values.
    """
    if cfg["problem.exit_level"] is None:
        return
    if min([cfg["problem.p"], *cfg["checks.p_values"]]) >= 2:
        return
    b = np.linspace(-6.0, 6.0, 241) * np.sqrt(cfg["problem.horizon"])
    eta = problem.eta.apply(b)[:, None]
    psi = cv.value(problem.phi, eta) + cv.value(problem.psi, eta)
    if np.any(psi != 0):
        raise ValueError("problem.exit_level: a random horizon with p < 2 needs a terminal value "
                         "where phi + psi vanish")


# ---------------------------------------------------------------- builders


def build_generator(cfg: RunConfig) -> gl.GeneratorSpec:
    name = cfg["problem.generator"]
    if name == "linear":
        return gl.linear(cfg["problem.rho"], cfg["problem.drift"], cfg["problem.g_rho"], cfg["problem.g_drift"])
    if name == "zero":
        return gl.zero_driver()
    if name == "cubic":
        return gl.cubic_monotone()
    return gl.example_a6()


def build_terminal(cfg: RunConfig) -> Terminal:
    return Terminal(cfg["problem.terminal"], value=cfg["problem.terminal_value"],
                    scale=cfg["problem.terminal_scale"], shift=cfg["problem.terminal_shift"],
                    lo=cfg["problem.terminal_lo"], hi=cfg["problem.terminal_hi"])


def build_problem(cfg: RunConfig) -> Problem:
    return Problem(build_generator(cfg), cv.parse_convex(cfg["problem.phi"]),
                   cv.parse_convex(cfg["problem.psi"]), build_terminal(cfg),
                   p=cfg["problem.p"], lam=cfg["problem.lambda"])


def build_grid(cfg: RunConfig, seed: Optional[int] = None) -> GridConfig:
    clock = Clock(cfg["problem.clock"], cfg["problem.clock_scale"], cfg["problem.clock_integrand"])
    return GridConfig(T=cfg["problem.horizon"], K=cfg["numerics.steps"], N=cfg["numerics.paths"],
                      seed=cfg["numerics.seed"] if seed is None else seed, clock=clock,
                      exit_level=cfg["problem.exit_level"])


def build_options(cfg: RunConfig) -> SolverOptions:
    return SolverOptions(penalty=cfg["numerics.penalty"], degree=cfg["numerics.degree"],
                         mollify=cfg["numerics.mollify"], moll_nodes=cfg["numerics.quad_nodes"])


def windows(cfg: RunConfig, K: int) -> List[tuple]:
    table = {"full": (0, K), "first_half": (0, K // 2), "second_half": (K // 2, K)}
    return [table[w] for w in cfg["checks.windows"]]


def eps_schedule(cfg: RunConfig) -> List[float]:
    return [float(e) for e in cfg["numerics.eps"]]
