"""Scenario files: YAML schema, validation and construction of the run objects.

Unknown keys are errors.  Every error names the dotted field (``scatter.dt``)
and, when known, the line in the file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .potentials import KINDS, PotentialModel
from .scattering import ScatterConfig
from .spectral import ComplexField, GridSpec, S0State, make_grid, s0_state

__all__ = ["ConfigError", "MissingInputError", "Scenario", "load_config", "parse_config",
           "dump_config", "SCHEMA"]


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


_REQ = object()

# field -> (type, default); nested dicts are sections, lists of dicts are given as [schema]
_ORBITAL = {
    "center": (list, _REQ),
    "width": (float, 1.0),
    "momentum": (list, None),
    "phase": (float, 0.0),
    "norm": (float, 0.3),
}
_POTENTIAL = {
    "kind": (str, "gaussian"),
    "amplitude": (float, _REQ),
    "width_or_power": (float, 1.0),
    "center": (list, None),
    "epsilon": (float, 1.0),
}
SCHEMA: dict[str, Any] = {
    "seed": (int, 0),
    "output_dir": (str, "hfscatter_out"),
    "grid": {
        "dim": (int, _REQ),
        "points_per_axis": (int, _REQ),
        "half_width": (float, _REQ),
    },
    "orbitals": [_ORBITAL],
    "v_int": (_POTENTIAL, None),
    "v_ext": (_POTENTIAL, None),
    "scatter": {
        "T": (float, _REQ),
        "dt": (float, _REQ),
        "tail_tol": (float, 1e-6),
        "richardson": (bool, False),
        "norm_budget": (float, 0.5),
        "dealias": (bool, False),
    },
    "simulate": {
        "sample_every": (int, 10),
    },
    "probe": {
        "direction": (list, None),
        "speeds": (list, [8.0, 16.0, 32.0]),
        "lam": (float, 0.0),
        "steps_per_unit": (float, 10.0),
    },
    "inversion": {
        "vint": {
            "orbital": (int, 0),
            "lambdas": (list, None),
            "rule": (str, "discrepancy"),
            "tau": (float, 1.5),
            "n_components": (int, None),
            "ratio": (float, 1e-6),
            "noise": (float, 0.01),
            "source": (str, "synthetic"),
            "path": (str, None),
            "generate": (bool, True),
            "kernel_dt": (float, 0.05),
        },
        "vext": {
            "orbital": (int, 0),
            "directions": (int, 32),
            "a": (float, 0.0),
            "eps_div": (float, 1e-3),
        },
    },
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-6`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                   |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                   |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                   |[-+]?\.(?:inf|Inf|INF)
                   |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                path = f"{prefix}[{i}]"
                out[path] = v.start_mark.line + 1
                walk(v, path)

    if root is not None:
        walk(root, "")
    return out


class _Checker:
    def __init__(self, lines: dict[str, int]):
        self.lines = lines

    def fail(self, path: str, msg: str):
        line = self.lines.get(path)
        where = f" (line {line})" if line else ""
        raise ConfigError(f"{path}: {msg}{where}")

    def value(self, path: str, typ, val):
        if val is None:
            return None
        if typ is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(path, f"expected a number, got {val!r}")
            return float(val)
        if typ is int:
            if isinstance(val, bool) or not isinstance(val, int):
                self.fail(path, f"expected an integer, got {val!r}")
            return int(val)
        if typ is bool:
            if not isinstance(val, bool):
                self.fail(path, f"expected true/false, got {val!r}")
            return val
        if typ is str:
            if not isinstance(val, str):
                self.fail(path, f"expected a string, got {val!r}")
            return val
        if typ is list:
            if not isinstance(val, list):
                self.fail(path, f"expected a list, got {val!r}")
            for i, v in enumerate(val):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    self.fail(f"{path}[{i}]", f"expected a number, got {v!r}")
            return [float(v) for v in val]
        if isinstance(typ, dict):
            return self.section(path, typ, val)
        raise TypeError(typ)

    def section(self, prefix: str, schema: dict, data) -> dict:
        if data is None:
            data = {}
        if not isinstance(data, dict):
            self.fail(prefix or "<root>", "expected a mapping")
        unknown = sorted(set(data) - set(schema))
        if unknown:
            p = f"{prefix}.{unknown[0]}" if prefix else str(unknown[0])
            self.fail(p, "unknown key")
        out = {}
        for key, spec in schema.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(spec, dict):
                out[key] = self.section(path, spec, data.get(key))
            elif isinstance(spec, list):
                items = data.get(key)
                if items is None:
                    self.fail(path, "required")
                if not isinstance(items, list) or not items:
                    self.fail(path, "expected a non-empty list")
                out[key] = [self.section(f"{path}[{i}]", spec[0], it) for i, it in enumerate(items)]
            else:
                typ, default = spec
                if key in data and data[key] is not None:
                    out[key] = self.value(path, typ, data[key])
                elif default is _REQ:
                    self.fail(path, "required")
                else:
                    out[key] = copy.deepcopy(default)
        return out


def _semantic_checks(cfg: dict, chk: _Checker):
    g = cfg["grid"]
    try:
        GridSpec(g["dim"], g["points_per_axis"], g["half_width"])
    except ValueError as exc:
        chk.fail("grid", str(exc))
    n = g["dim"]
    for i, orb in enumerate(cfg["orbitals"]):
        p = f"orbitals[{i}]"
        if len(orb["center"]) != n:
            chk.fail(f"{p}.center", f"expected {n} components")
        if orb["momentum"] is not None and len(orb["momentum"]) != n:
            chk.fail(f"{p}.momentum", f"expected {n} components")
        if orb["width"] <= 0:
            chk.fail(f"{p}.width", "must be positive")
        if orb["norm"] < 0:
            chk.fail(f"{p}.norm", "must be non-negative")
    for name in ("v_int", "v_ext"):
        pot = cfg[name]
        if pot is None:
            continue
        if pot["kind"] not in KINDS:
            chk.fail(f"{name}.kind", f"must be one of {sorted(KINDS)}")
        if pot["amplitude"] < 0:
            chk.fail(f"{name}.amplitude", "must be non-negative")
        if pot["width_or_power"] <= 0:
            chk.fail(f"{name}.width_or_power", "must be positive")
        if pot["center"] is not None and len(pot["center"]) != n:
            chk.fail(f"{name}.center", f"expected {n} components")
        if name == "v_int" and pot["center"] is not None and any(pot["center"]):
            chk.fail("v_int.center", "the interaction must be centred at the origin")
    sc = cfg["scatter"]
    for key in ("T", "dt", "tail_tol", "norm_budget"):
        if not sc[key] > 0:
            chk.fail(f"scatter.{key}", "must be positive")
    try:
        _scatter(sc)
    except ValueError as exc:
        chk.fail("scatter.dt", str(exc))
    if cfg["simulate"]["sample_every"] < 1:
        chk.fail("simulate.sample_every", "must be at least 1")
    pr = cfg["probe"]
    if pr["direction"] is not None and (len(pr["direction"]) != n or not any(pr["direction"])):
        chk.fail("probe.direction", f"expected a non-zero vector with {n} components")
    sp = pr["speeds"]
    if not sp or any(s <= 0 for s in sp) or any(b <= a for a, b in zip(sp, sp[1:])):
        chk.fail("probe.speeds", "must be positive and strictly increasing")
    if not pr["lam"] > -1:
        chk.fail("probe.lam", "must exceed -1")
    if not pr["steps_per_unit"] > 0:
        chk.fail("probe.steps_per_unit", "must be positive")
    vi = cfg["inversion"]["vint"]
    if vi["rule"] not in ("discrepancy", "fixed", "ratio"):
        chk.fail("inversion.vint.rule", "must be discrepancy, fixed or ratio")
    if vi["source"] not in ("synthetic", "scattering", "file"):
        chk.fail("inversion.vint.source", "must be synthetic, scattering or file")
    if vi["noise"] < 0:
        chk.fail("inversion.vint.noise", "must be non-negative")
    n_orb = len(cfg["orbitals"])
    for key in ("vint", "vext"):
        if not 0 <= cfg["inversion"][key]["orbital"] < n_orb:
            chk.fail(f"inversion.{key}.orbital", f"must index one of the {n_orb} orbitals")
    if cfg["inversion"]["vext"]["directions"] < 2:
        chk.fail("inversion.vext.directions", "must be at least 2")
    if not cfg["inversion"]["vext"]["eps_div"] > 0:
        chk.fail("inversion.vext.eps_div", "must be positive")


def _scatter(sc: dict) -> ScatterConfig:
    return ScatterConfig(sc["T"], sc["dt"], sc["tail_tol"], sc["richardson"], sc["norm_budget"],
                         sc["dealias"])


def parse_config(text: str) -> dict:
    """Validated configuration with all defaults filled in."""
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    chk = _Checker(_line_map(text))
    cfg = chk.section("", SCHEMA, data)
    _semantic_checks(cfg, chk)
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=None)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _potential(d: dict | None, role: str) -> PotentialModel | None:
    if d is None:
        return None
    center = None if d["center"] is None else tuple(d["center"])
    return PotentialModel(d["kind"], d["amplitude"], d["width_or_power"], center, role, d["epsilon"])


@dataclass
class Scenario:
    """Run objects built from a validated configuration."""

    cfg: dict

    @property
    def grid(self) -> GridSpec:
        g = self.cfg["grid"]
        return GridSpec(g["dim"], g["points_per_axis"], g["half_width"])

    @property
    def v_int(self) -> PotentialModel | None:
        return _potential(self.cfg["v_int"], "interaction")

    @property
    def v_ext(self) -> PotentialModel | None:
        return _potential(self.cfg["v_ext"], "external")

    @property
    def scatter(self) -> ScatterConfig:
        return _scatter(self.cfg["scatter"])

    def scatter_for_speed(self, speed: float) -> ScatterConfig:
        """Window of the scenario with ``dt`` shrunk so a step covers ``1/steps_per_unit`` length units at ``speed``."""
        base = self.scatter
        per = self.cfg["probe"]["steps_per_unit"]
        steps = max(int(np.ceil(2 * base.T * per * speed)), base.steps)
        return ScatterConfig(base.T, 2 * base.T / steps, base.tail_tol, False, base.norm_budget,
                             base.dealias)

    def base_states(self) -> list[S0State]:
        grid = self.grid
        x = make_grid(grid).nodes
        n = grid.dim
        out = []
        for orb in self.cfg["orbitals"]:
            c = np.asarray(orb["center"])
            p = np.zeros(n) if orb["momentum"] is None else np.asarray(orb["momentum"])
            s = orb["width"]
            d = x - c
            vals = (orb["norm"] * (np.pi * s * s) ** (-n / 4)
                    * np.exp(-np.sum(d * d, axis=-1) / (2 * s * s) + 1j * (x @ p) + 1j * orb["phase"]))
            out.append(s0_state(ComplexField(grid, vals)))
        return out

    @property
    def direction(self) -> np.ndarray:
        d = self.cfg["probe"]["direction"]
        return np.eye(self.grid.dim)[0] if d is None else np.asarray(d, dtype=float)
