"""Experiment configuration: bracketed sections of ``key = value`` lines.

Every key has a default; unknown sections or keys are rejected and
out-of-range values are reported with the line they came from.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass

from .errors import ConfigError

# section -> key -> (kind, default)
SCHEMA = {
    "metric": {
        "dim": ("int", "3"),
        "variant": ("choice:flat,constant_curvature,taylor,perturbed", "perturbed"),
        "base": ("choice:flat,constant_curvature,taylor", "flat"),
        "curvature": ("float", "0"),
        "epsilon": ("float", "0.95"),
        "bump_scale": ("float", "0.005"),
        "parity": ("choice:auto,odd,even", "auto"),
        "delta0": ("float", "0.5"),
        "coeff_seed": ("optint", ""),
        "coeff_amplitude": ("float", "0.4"),
        "coeff_frequency": ("float", "2.0"),
    },
    "flow": {
        "step": ("float", "0.001"),
        "beta": ("float", "0.4"),
        "s_max": ("float", "0.4"),
        "energy_tolerance": ("float", "1e-6"),
    },
    "maximal": {
        "delta": ("float", "0.0625"),
        "grid_n": ("int", "128"),
        "region_center": ("floats", "0.12, 0, 0.06"),
        "region_halfwidth": ("float", "0.05"),
        "region_n": ("int", "7"),
        "region_shape": ("choice:ball,box", "ball"),
        "coarse_net": ("int", "0"),
        "n_axial": ("int", "32"),
        "n_transversal": ("int", "32"),
        "min_cells": ("float", "2"),
        "screen": ("bool", "true"),
        "max_screen": ("int", "20000"),
    },
    "sweep": {
        "deltas": ("floats", "0.0625, 0.03125, 0.015625, 0.0078125"),
        "p": ("float", "2.5"),
        "q": ("optfloat", ""),
        "grid_floor": ("int", "64"),
        "grid_cap": ("int", "256"),
        "cells_per_delta": ("float", "8"),
        "min_points": ("int", "4"),
    },
    "output": {
        "directory": ("str", "."),
        "format": ("choice:csv", "csv"),
    },
    "run": {
        "seed": ("int", "0"),
        "timings": ("bool", "false"),
    },
}


def _convert(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v
    if kind == "optint":
        return None if raw == "" else int(raw)
    if kind == "optfloat":
        return None if raw == "" else _convert("float", raw)
    if kind == "floats":
        vals = [float(t) for t in raw.replace(";", ",").split(",") if t.strip()]
        if not vals or not all(math.isfinite(v) for v in vals):
            raise ValueError("must be a comma-separated list of finite numbers")
        return tuple(vals)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError("must be true or false")
    if kind.startswith("choice:"):
        options = kind.split(":", 1)[1].split(",")
        if raw not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return raw
    return raw


def _key_lines(text: str) -> dict:
    """Map ``(section, key)`` to the 1-based line where it is set."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = s.split("=", 1)[0] if "=" in s else s.split(":", 1)[0]
            out[(section, key.strip().lower())] = i
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict  # section -> key -> converted value
    raw: dict  # section -> key -> normalised string

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def text(self) -> str:
        """Canonical rendering of the fully resolved configuration."""
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {s: dict(self.raw[s]) for s in SCHEMA}

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """New config with ``{(section, key): string}`` overrides applied and validated."""
        merged = {s: dict(self.raw[s]) for s in SCHEMA}
        for (section, key), value in overrides.items():
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            merged[section][key] = str(value)
        return _build(merged, {})


def _build(raw: dict, lines: dict) -> ExperimentConfig:
    values = {}
    norm = {}
    for section, keys in SCHEMA.items():
        values[section], norm[section] = {}, {}
        for key, (kind, default) in keys.items():
            text = raw.get(section, {}).get(key, default)
            where = f" (line {lines[(section, key)]})" if (section, key) in lines else ""
            try:
                value = _convert(kind, text)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}{where}: invalid value {text!r}: {exc}") from None
            values[section][key] = value
            norm[section][key] = _render(value)
    cfg = ExperimentConfig(values, norm)
    _validate(cfg, lines)
    return cfg


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _validate(cfg: ExperimentConfig, lines: dict) -> None:
    def fail(section, key, msg):
        where = f" (line {lines[(section, key)]})" if (section, key) in lines else ""
        raise ConfigError(f"{section}.{key}{where}: {msg}")

    m, f, mx, sw = cfg["metric"], cfg["flow"], cfg["maximal"], cfg["sweep"]
    if m["dim"] < 2:
        fail("metric", "dim", "must be >= 2")
    if m["delta0"] <= 0:
        fail("metric", "delta0", "must be positive")
    if m["curvature"] not in (-1.0, 0.0, 1.0):
        fail("metric", "curvature", "must be -1, 0 or 1")
    if m["epsilon"] < 0:
        fail("metric", "epsilon", "must be >= 0")
    if m["bump_scale"] <= 0:
        fail("metric", "bump_scale", "must be positive")
    if f["step"] <= 0:
        fail("flow", "step", "must be positive")
    if not 0 < f["beta"] <= 0.4:
        fail("flow", "beta", "must lie in (0, 0.4]")
    if f["s_max"] <= 0:
        fail("flow", "s_max", "must be positive")
    if f["energy_tolerance"] <= 0:
        fail("flow", "energy_tolerance", "must be positive")
    if mx["delta"] <= 0:
        fail("maximal", "delta", "must be positive")
    if mx["grid_n"] < 8:
        fail("maximal", "grid_n", "must be >= 8")
    if len(mx["region_center"]) != m["dim"]:
        fail("maximal", "region_center", f"must have {m['dim']} coordinates")
    if mx["region_halfwidth"] <= 0:
        fail("maximal", "region_halfwidth", "must be positive")
    if mx["region_n"] < 1:
        fail("maximal", "region_n", "must be positive")
    if mx["coarse_net"] < 0:
        fail("maximal", "coarse_net", "must be >= 0 (0 selects the default size)")
    if mx["n_axial"] < 32 or mx["n_axial"] % 2:
        fail("maximal", "n_axial", "must be an even number >= 32")
    if mx["n_transversal"] < 1:
        fail("maximal", "n_transversal", "must be positive")
    if mx["min_cells"] <= 0:
        fail("maximal", "min_cells", "must be positive")
    if mx["max_screen"] < 0:
        fail("maximal", "max_screen", "must be >= 0")
    d = sw["deltas"]
    if any(x <= 0 for x in d) or any(b >= a for a, b in zip(d, d[1:])):
        fail("sweep", "deltas", "must be positive and strictly decreasing")
    if sw["p"] < 1:
        fail("sweep", "p", "must be >= 1")
    if sw["q"] is not None and sw["q"] < 1:
        fail("sweep", "q", "must be >= 1")
    if sw["grid_floor"] < 8 or sw["grid_cap"] < sw["grid_floor"]:
        fail("sweep", "grid_cap", "need 8 <= grid_floor <= grid_cap")
    if sw["cells_per_delta"] <= 0:
        fail("sweep", "cells_per_delta", "must be positive")
    if sw["min_points"] < 3:
        fail("sweep", "min_points", "must be >= 3")
    if cfg["run"]["seed"] < 0:
        fail("run", "seed", "must be >= 0")


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text; missing keys take their defaults."""
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str.lower
    try:
        parser.read_file(io.StringIO(text))
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"line {exc.lineno}: expected a [section] header") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.message if hasattr(exc, 'message') else exc}") from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else "?"
        raise ConfigError(f"line {lineno}: cannot parse {exc.errors[0][1] if exc.errors else ''}") from None
    lines = _key_lines(text)
    raw = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        raw[section] = {}
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                where = f" (line {lines[(section, key)]})" if (section, key) in lines else ""
                raise ConfigError(f"unknown key {section}.{key}{where}")
            raw[section][key] = value
    return _build(raw, lines)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config() -> ExperimentConfig:
    return parse_config("")
