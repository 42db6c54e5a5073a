"""Run configuration: flat ``key = value`` lines with dotted section prefixes.

Example::

    seed = 7
    horizon_days = 60
    windows = 10m, 1h, 3h, 6h, 12h, 24h
    population.n_groups = 2000
    behavior.theta_ext = 0.003
    bootstrap.reps = 1000

Lines starting with ``#`` are comments.  Unknown keys are rejected.  Values
are parsed by the type of the field's default; tuples are comma-separated and
durations accept ``s``, ``m``, ``h`` and ``d`` suffixes.  Precedence, lowest
first: defaults, the file, the ``HONGBAO_SEED`` environment variable (seed
only), ``--set key=value`` overrides.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import InvalidConfigError
from .population import PopulationConfig
from .simulator import BehaviorParams

_DURATION = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([smhd]?)\s*$")
_UNIT = {"": 1.0, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}


def parse_duration(text) -> float:
    """Seconds from ``"10m"``, ``"24h"``, ``"7d"`` or a plain number of seconds."""
    if isinstance(text, (int, float)):
        v = float(text)
    else:
        m = _DURATION.match(str(text))
        if not m:
            raise InvalidConfigError(f"bad duration {text!r}")
        v = float(m.group(1)) * _UNIT[m.group(2)]
    if not v > 0:
        raise InvalidConfigError(f"duration must be positive, got {text!r}")
    return v


def format_duration(seconds: float) -> str:
    s = float(seconds)
    for unit, size in (("d", 86400.0), ("h", 3600.0), ("m", 60.0)):
        if s >= size and s % size == 0 and not (unit == "d" and s == 86400.0):
            return f"{int(s // size)}{unit}"
    return f"{s:g}s"


@dataclass
class RunConfig:
    seed: int = 1
    horizon_days: float = 60.0
    windows: tuple = ("10m", "1h", "3h", "6h", "12h", "24h")
    tau: str = "24h"
    tau_sweep: tuple = ("6h", "12h", "24h", "48h")
    output: str = "hongbao_out"
    bootstrap_reps: int = 1000
    randomization_alpha: float = 0.1
    randomization_max_share: float = 0.01
    moderators: tuple = ("clustering", "norm_degree", "eigen", "overall_clustering")
    subsample_label: str = "festival"
    population: PopulationConfig = field(default_factory=PopulationConfig)
    behavior: BehaviorParams = field(default_factory=BehaviorParams)

    @property
    def window_seconds(self) -> tuple:
        return tuple(parse_duration(w) for w in self.windows)

    @property
    def tau_seconds(self) -> float:
        return parse_duration(self.tau)

    def validate(self) -> "RunConfig":
        if self.horizon_days <= 2:
            raise InvalidConfigError("horizon_days must exceed 2")
        if self.bootstrap_reps < 0:
            raise InvalidConfigError("bootstrap.reps must be >= 0")
        if not self.windows:
            raise InvalidConfigError("at least one window is required")
        for t in (*self.windows, self.tau, *self.tau_sweep):
            parse_duration(t)
        if not 0 < self.randomization_alpha < 1:
            raise InvalidConfigError("randomization.alpha must lie in (0, 1)")
        self.population.validate()
        self.behavior.validate()
        return self

    def to_text(self) -> str:
        """Every key with its current value, in file format."""
        return "".join(f"{k} = {v}\n" for k, v in flatten(self).items())


# top-level keys that read as dotted sections
_ALIASES = {"bootstrap.reps": "bootstrap_reps", "randomization.alpha": "randomization_alpha",
            "randomization.max_share": "randomization_max_share"}


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def flatten(cfg: RunConfig) -> dict:
    out = {}
    rev = {v: k for k, v in _ALIASES.items()}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in ("population", "behavior"):
            for g in fields(v):
                out[f"{f.name}.{g.name}"] = _fmt(getattr(v, g.name))
        else:
            out[rev.get(f.name, f.name)] = _fmt(v)
    return out


def _coerce(key: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [x.strip() for x in text.split(",") if x.strip()]
            proto = default[0] if default else ""
            if isinstance(proto, str):
                return tuple(items)
            if isinstance(proto, int) and all(re.fullmatch(r"-?\d+", x) for x in items):
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
        return text
    except ValueError:
        raise InvalidConfigError(f"bad value for {key}: {text!r}") from None


def apply(cfg: RunConfig, key: str, value: str) -> RunConfig:
    """Return a copy of ``cfg`` with one dotted key set from its text value."""
    key = key.strip()
    name = _ALIASES.get(key, key)
    if "." in name:
        section, sub = name.split(".", 1)
        if section not in ("population", "behavior"):
            raise InvalidConfigError(f"unknown key {key!r}")
        obj = getattr(cfg, section)
        names = {f.name for f in fields(obj)}
        if sub not in names:
            raise InvalidConfigError(f"unknown key {key!r}")
        new = replace(obj, **{sub: _coerce(key, getattr(obj, sub), value)})
        return replace(cfg, **{section: new})
    names = {f.name for f in fields(cfg)} - {"population", "behavior"}
    if name not in names:
        raise InvalidConfigError(f"unknown key {key!r}")
    return replace(cfg, **{name: _coerce(key, getattr(cfg, name), value)})


def parse_lines(lines, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{source}:{no}: expected key = value")
        k, v = line.split("=", 1)
        try:
            cfg = apply(cfg, k, v)
        except InvalidConfigError as e:
            raise InvalidConfigError(f"{source}:{no}: {e}") from None
    return cfg


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults, then the file, then ``HONGBAO_SEED``, then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidConfigError(f"config file not found: {p}")
        cfg = parse_lines(p.read_text().splitlines(), cfg, str(p))
    env = os.environ if env is None else env
    if env.get("HONGBAO_SEED"):
        cfg = apply(cfg, "seed", env["HONGBAO_SEED"])
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg = apply(cfg, k, v)
    return cfg.validate()
