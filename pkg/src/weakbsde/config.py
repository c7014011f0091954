"""Flat ``section.key = value`` run configuration.

Lines starting with ``#`` are comments.  Every key has a type and a default;
``problem.loss`` and ``problem.driver`` are required.  Serializing a config
and parsing it back gives the same config.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .problem import ClaimSpec, Driver, LossMap, MarketModel, ProblemSpec

REQUIRED = ("problem.loss", "problem.driver")


def _floats(text: str) -> tuple:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(x) for x in text.split(","))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PARSERS = {"int": int, "float": float, "str": str.strip, "bool": _bool, "floats": _floats}

# key -> (type, default, doc)
SCHEMA: dict[str, tuple[str, object, str]] = {
    "problem.loss": ("str", None, "indicator | linear | power | knots"),
    "problem.loss_q": ("float", 2.0, "exponent of the power loss"),
    "problem.phi_m": ("floats", (), "knot positions of Phi (loss = knots)"),
    "problem.phi_v": ("floats", (), "knot values of Phi (loss = knots)"),
    "problem.driver": ("str", None, "zero | linear | abs_z"),
    "problem.a_y": ("float", 0.0, "coefficient of y"),
    "problem.a_z": ("floats", (0.0,), "coefficients of z, one per Brownian component"),
    "problem.g0": ("float", 0.0, "constant term of a linear driver"),
    "problem.kappa": ("float", 0.0, "weight of |z| for abs_z"),
    "problem.T": ("float", 1.0, "horizon"),
    "problem.d": ("int", 1, "Brownian dimension"),
    "problem.market": ("bool", False, "simulate a geometric Brownian asset"),
    "problem.s0": ("float", 1.0, "initial asset level"),
    "problem.sigma": ("float", 0.2, "asset volatility"),
    "problem.drift": ("float", 0.0, "asset drift"),
    "problem.claim": ("str", "constant", "constant | digital | call"),
    "problem.strike": ("float", 1.0, "claim strike"),
    "problem.claim_scale": ("float", 1.0, "claim multiplier"),
    "simulation.n_paths": ("int", 200_000, "number of paths"),
    "simulation.n_steps": ("int", 64, "time steps"),
    "simulation.seed": ("int", 42, "generator seed"),
    "solver.backend": ("str", "mc", "mc | tree"),
    "solver.method": ("str", "profile", "policy | profile | both"),
    "solver.family": ("str", "constant", "constant | feedback_grid"),
    "solver.budget": ("int", 400, "policy evaluations per threshold"),
    "solver.basis_degree": ("int", 2, "regression polynomial degree"),
    "solver.l_lo": ("float", 1e-4, "lower end of the multiplier bracket"),
    "solver.l_hi": ("float", 1e4, "upper end of the multiplier bracket"),
    "solver.tree_depth": ("int", 8, "depth of the binary tree (backend = tree)"),
    "task.m_grid": ("floats", tuple(round(0.1 * i, 10) for i in range(11)), "thresholds"),
    "task.t_mid": ("floats", (0.5,), "intermediate times for dpp"),
    "task.dpp_resolution": ("int", 21, "inner curve grid size for dpp"),
    "output.path": ("str", "", "CSV path (default: <subcommand>.csv)"),
    "output.precision": ("int", 10, "significant digits"),
}

CHOICES = {
    "problem.loss": ("indicator", "linear", "power", "knots"),
    "problem.driver": ("zero", "linear", "abs_z"),
    "problem.claim": ("constant", "digital", "call"),
    "solver.backend": ("mc", "tree"),
    "solver.method": ("policy", "profile", "both"),
    "solver.family": ("constant", "feedback_grid"),
}

POSITIVE = {
    "simulation.n_paths": 1, "simulation.n_steps": 1, "problem.d": 1, "solver.budget": 1,
    "output.precision": 1, "task.dpp_resolution": 3, "solver.tree_depth": 1,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            vals[k.replace("__", ".")] = v
        return RunConfig(vals)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values


def _check_value(key: str, value, line: int | None):
    where = f"line {line}: " if line else ""
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{where}{key} must be one of {', '.join(CHOICES[key])}")
    if key in POSITIVE and value < POSITIVE[key]:
        name = key.split(".", 1)[1]
        raise ConfigError(f"{where}{name} must be ≥ {POSITIVE[key]}")


def parse_config(text: str) -> RunConfig:
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    seen = set()
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'section.key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        kind = SCHEMA[key][0]
        try:
            parsed = PARSERS[kind](val)
        except ValueError:
            raise ConfigError(f"line {no}: {key} expects {kind}, got {val!r}") from None
        _check_value(key, parsed, no)
        values[key] = parsed
        seen.add(key)
    for key in REQUIRED:
        if key not in seen:
            raise ConfigError(f"missing required key {key}")
    return RunConfig(values)


def _format(kind: str, value) -> str:
    if kind == "floats":
        return ", ".join(repr(float(x)) for x in value)
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    section = None
    for key, (kind, _, _) in SCHEMA.items():
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                lines.append("")
            section = sec
        lines.append(f"{key} = {_format(kind, cfg.values[key])}")
    return "\n".join(lines) + "\n"


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("weakbsde").joinpath("presets").iterdir()
                  if p.name.endswith(".cfg"))


def load_config(path: str) -> RunConfig:
    """Read a config file; a bare preset name (``bsqh``, ``tree``, ``power``) loads the shipped preset."""
    p = Path(path)
    if p.exists():
        return parse_config(p.read_text())
    name = path[:-4] if path.endswith(".cfg") else path
    res = resources.files("weakbsde").joinpath("presets", f"{name}.cfg")
    if res.is_file():
        return parse_config(res.read_text())
    raise ConfigError(f"config file not found: {path}")


def build_loss(cfg: RunConfig) -> LossMap:
    kind = cfg["problem.loss"]
    rf = cfg["problem.claim"] != "constant" or cfg["problem.claim_scale"] != 1.0
    if kind == "indicator":
        return LossMap.indicator(random_factor=rf)
    if kind == "linear":
        return LossMap.linear(random_factor=rf)
    if kind == "power":
        return LossMap.power_loss(cfg["problem.loss_q"], random_factor=rf)
    m, v = cfg["problem.phi_m"], cfg["problem.phi_v"]
    if len(m) != len(v) or len(m) < 2:
        raise ConfigError("problem.phi_m and problem.phi_v need the same length >= 2")
    return LossMap.from_phi(m, v, random_factor=rf)


def build_driver(cfg: RunConfig) -> Driver:
    d = cfg["problem.d"]
    a_z = np.asarray(cfg["problem.a_z"], dtype=float)
    if a_z.size == 1 and d > 1:
        a_z = np.full(d, a_z[0])
    if a_z.size != d:
        raise ConfigError("problem.a_z needs one entry per Brownian component")
    kind = cfg["problem.driver"]
    if kind == "zero":
        return Driver.zero(d)
    if kind == "linear":
        return Driver.linear(cfg["problem.a_y"], a_z, cfg["problem.g0"])
    return Driver.abs_z(cfg["problem.kappa"], cfg["problem.a_y"], a_z)


def build_spec(cfg: RunConfig) -> ProblemSpec:
    market = None
    if cfg["problem.market"]:
        market = MarketModel(cfg["problem.s0"], cfg["problem.sigma"], cfg["problem.drift"])
    claim = ClaimSpec(cfg["problem.claim"], cfg["problem.strike"], cfg["problem.claim_scale"])
    return ProblemSpec(build_loss(cfg), build_driver(cfg), cfg["problem.T"], cfg["problem.d"],
                       market, claim, tuple(cfg["task.m_grid"]))
