"""Run configuration: defaults, INI files and command-line overrides."""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .exceptions import ValidationError
from .matching import DEFAULT_DELTA_GRID, DEFAULT_SCALE_GRID

WORKERS_ENV = "QERF_WORKERS"


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _names(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _opt_float(text):
    if text is None or (isinstance(text, str) and text.strip().lower() in ("", "none", "auto")):
        return None
    return float(text)


def _opt_str(text):
    if text is None or (isinstance(text, str) and text.strip().lower() in ("", "none")):
        return None
    return str(text).strip()


def _opt_floats(text):
    if text is None or (isinstance(text, str) and text.strip().lower() in ("", "none", "auto")):
        return None
    return _floats(text)


@dataclass
class RunConfig:
    """Resolved settings of one command.

    Precedence is command-line flag, then config file, then the defaults
    below. ``workers`` falls back to the ``QERF_WORKERS`` environment
    variable before the default of 1.
    """

    # data
    input: Optional[str] = None
    exposure_col: str = "w"
    outcome_col: Optional[str] = "y"
    covariate_cols: tuple = ()
    weight_col: Optional[str] = None
    trim: Optional[tuple] = None
    # design
    delta: Optional[float] = None
    scale: Optional[float] = None
    delta_grid: tuple = DEFAULT_DELTA_GRID
    scale_grid: tuple = DEFAULT_SCALE_GRID
    # analysis
    taus: tuple = (0.1, 0.5, 0.9)
    grid_size: int = 50
    kind: str = "smoothed"
    h_mean: Optional[float] = None
    h_grid: Optional[tuple] = None
    increment: float = 1.0
    variance_m: int = 0
    # inference
    B: int = 0
    alpha: float = 0.05
    # simulate / bench
    scenario: str = "A"
    n: int = 1000
    scenarios: tuple = ("A",)
    ns: tuple = (1000,)
    reps: int = 100
    estimators: tuple = ("matching", "matching-s", "iptw")
    mc_draws: int = 100_000
    normal_scale: str = "sd"
    lognormal_scale: str = "variance"
    c5_support: str = "integers"
    # run
    seed: Optional[int] = None
    workers: int = 1
    output_dir: str = "."
    output: Optional[str] = None

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


_PARSERS = {
    "input": _opt_str, "exposure_col": str, "outcome_col": _opt_str, "covariate_cols": _names,
    "weight_col": _opt_str, "trim": _opt_floats,
    "delta": _opt_float, "scale": _opt_float, "delta_grid": _floats, "scale_grid": _floats,
    "taus": _floats, "grid_size": int, "kind": str, "h_mean": _opt_float, "h_grid": _opt_floats,
    "increment": float, "variance_m": int, "B": int, "alpha": float,
    "scenario": str, "n": int, "scenarios": _names, "ns": _ints, "reps": int, "estimators": _names,
    "mc_draws": int, "normal_scale": str, "lognormal_scale": str, "c5_support": str,
    "seed": lambda v: None if v is None else int(v), "workers": int, "output_dir": str, "output": _opt_str,
}

# INI section of every key; sections only group keys for readability
SECTIONS = {
    "data": ("input", "exposure_col", "outcome_col", "covariate_cols", "weight_col", "trim"),
    "design": ("delta", "scale", "delta_grid", "scale_grid"),
    "analysis": ("taus", "grid_size", "kind", "h_mean", "h_grid", "increment", "variance_m"),
    "inference": ("B", "alpha"),
    "simulation": ("scenario", "n", "scenarios", "ns", "reps", "estimators", "mc_draws",
                   "normal_scale", "lognormal_scale", "c5_support"),
    "run": ("seed", "workers", "output_dir", "output"),
}
_KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}


def read_ini(path) -> dict:
    """Flat ``{key: raw string}`` from an INI file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} not found")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ValidationError(f"cannot parse config file {path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ValidationError(f"unknown key {key!r} in section [{section}]")
            out[key] = value
    return out


def resolve(overrides: dict, config_path=None, env=None) -> RunConfig:
    """Merge defaults, an optional INI file and explicit overrides (``None`` means unset)."""
    env = os.environ if env is None else env
    raw = read_ini(config_path) if config_path else {}
    if "workers" not in raw and env.get(WORKERS_ENV):
        raw["workers"] = env[WORKERS_ENV]
    raw.update({k: v for k, v in overrides.items() if v is not None and k in _PARSERS})
    values = {}
    for k, v in raw.items():
        try:
            values[k] = _PARSERS[k](v)
        except (TypeError, ValueError):
            raise ValidationError(f"invalid value {v!r} for {k}") from None
    cfg = RunConfig(**values)
    _check(cfg)
    return cfg


def _check(cfg: RunConfig):
    if cfg.workers < 1:
        raise ValidationError("workers must be at least 1")
    if cfg.trim is not None and (len(cfg.trim) != 2 or not 0.0 <= cfg.trim[0] < cfg.trim[1] <= 1.0):
        raise ValidationError("trim needs two fractions 0 <= lo < hi <= 1")
    if cfg.kind not in ("smoothed", "empirical"):
        raise ValidationError("kind must be 'smoothed' or 'empirical'")
    if cfg.grid_size < 2:
        raise ValidationError("grid_size must be at least 2")
    if not 0.0 < cfg.alpha < 1.0:
        raise ValidationError("alpha must lie in (0, 1)")
    if cfg.B < 0 or cfg.B == 1:
        raise ValidationError("B must be 0 (no bootstrap) or at least 2")
    if cfg.variance_m < 0:
        raise ValidationError("variance_m must be non-negative")
    if cfg.increment <= 0:
        raise ValidationError("increment must be positive")
    if any(not 0.0 < t < 1.0 for t in cfg.taus) or not cfg.taus:
        raise ValidationError("taus must lie in (0, 1)")


def write_ini(cfg: RunConfig, path):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    d = asdict(cfg)
    for section, keys in SECTIONS.items():
        parser[section] = {}
        for k in keys:
            v = d[k]
            if v is None:
                continue
            parser[section][k] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
    with Path(path).open("w") as fh:
        parser.write(fh)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))
