"""Run configuration: JSON schema, cross-field resolution rules, loading."""
from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ParseError, ResolutionRuleViolation, SchemaViolation
from .potential import potential_from_spec
from .quantum import Grid, InitialStateSpec, dt_max, min_points
from .symbols import symbol_from_spec

_number_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_box = {"type": "array", "minItems": 1,
        "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}}
_field = {"anyOf": [{"type": "number"}, {"type": "object"}]}

SCHEMA = {
    "type": "object",
    "required": ["potential", "initial_state", "time", "eps_list"],
    "additionalProperties": False,
    "properties": {
        "potential": {
            "type": "object",
            "required": ["dim", "box"],
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 1, "maximum": 3},
                "codim": {"type": "integer", "minimum": 1},
                "w": _field,
                "V0": _field,
                "g": {"anyOf": [{"const": "coordinates"}, {"type": "array", "items": _field}]},
                "box": _box,
                "xi_scale": {"type": "number", "exclusiveMinimum": 0},
                "expect_crossings": {"type": "boolean"},
                "name": {"type": "string"},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"anyOf": [{"type": "integer", "minimum": 2},
                                {"type": "array", "items": {"type": "integer", "minimum": 2}}]},
                "box": _box,
                "pad": {"type": "number", "minimum": 0},
            },
        },
        "initial_state": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["coherent", "wkb"]},
                "q": _number_list,
                "p": _number_list,
                "A": _field,
                "S": _field,
                "box": _box,
            },
        },
        "time": {
            "type": "object",
            "required": ["t_final"],
            "additionalProperties": False,
            "properties": {
                "t_final": {"type": "number", "minimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "snapshots": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "n_samples": {"type": "integer", "minimum": 2},
            },
        },
        "eps_list": {"type": "array", "minItems": 1,
                     "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "symbols": {"type": "array", "items": {"type": "object", "required": ["kind"]}},
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "R": _number_list,
                "delta": _number_list,
                "tube_radii": _number_list,
                "t_observe": {"type": "number", "minimum": 0},
                "realization": {"enum": ["wigner", "husimi"]},
                "n_samples": {"type": "integer", "minimum": 1},
                "checks": {"type": "object"},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
    },
}


def _pointer(parts):
    return "/" + "/".join(str(p) for p in parts)


def schema_violations(raw):
    """All schema violations as ``(json pointer, message)`` pairs, sorted by path."""
    out = []
    for err in jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw):
        path = list(err.absolute_path)
        if err.validator == "required":
            m = re.match(r"'([^']+)' is a required property", err.message)
            if m:
                path.append(m.group(1))
        out.append((_pointer(path), err.message))
    return sorted(out)


@dataclass
class RunConfig:
    raw: dict
    potential: object
    initial: InitialStateSpec
    t_final: float
    eps_list: list
    dt: float | None = None
    snapshots: list = field(default_factory=list)
    n_samples: int = 201
    symbols: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    grid_spec: dict | None = None
    seed: int = 0
    output: str = "out"

    @property
    def config_hash(self):
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def grid_box(self):
        spec = self.grid_spec or {}
        if "box" in spec:
            return np.asarray(spec["box"], float)
        pad = spec.get("pad", 0.3)
        box = np.asarray(self.potential.box, float)
        width = box[:, 1] - box[:, 0]
        return np.stack([box[:, 0] - pad / 2 * width, box[:, 1] + pad / 2 * width], axis=1)

    def grid_for(self, eps):
        """Quantum grid for one eps: the configured sizes, or the resolution-rule minimum."""
        box = self.grid_box()
        d = self.potential.dim
        spec = self.grid_spec or {}
        if "n" in spec:
            n = spec["n"]
            ns = [n] * d if isinstance(n, int) else list(n)
        else:
            reach = momentum_reach(self.potential, self.initial, eps)
            ns = []
            for lo, hi in box:
                n = min_points(hi - lo, reach, eps)
                if self.initial.kind == "coherent":
                    n = max(n, 2 ** math.ceil(math.log2((hi - lo) / (math.sqrt(eps) / 4))))
                ns.append(n)
        return Grid(tuple((lo, hi, n) for (lo, hi), n in zip(box, ns)), eps)

    def observation_times(self):
        if self.snapshots:
            return sorted(set(float(t) for t in self.snapshots) | {0.0})
        return [0.0, self.t_final] if self.t_final > 0 else [0.0]


def momentum_reach(pot, initial, eps, n_lattice=33):
    """Largest |xi| the run can reach: energy bound ``sqrt(2 (H - min V))`` plus packet width."""
    d = pot.dim
    axes = [np.linspace(lo, hi, n_lattice) for lo, hi in pot.box]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    v_min = float(np.min(pot.eval_V(pts, check_box=False)))
    if initial.kind == "coherent":
        energy = 0.5 * float(initial.p @ initial.p) + float(pot.eval_V(initial.q, check_box=False))
        return math.sqrt(max(2 * (energy - v_min), 0.0)) + 6 * math.sqrt(eps / 2)
    box = initial.box if initial.box is not None else pot.box
    axes = [np.linspace(lo, hi, n_lattice) for lo, hi in np.asarray(box, float)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    grad = np.abs(initial.phase.gradient(pts))
    energy = float(np.max(0.5 * np.sum(grad ** 2, axis=-1) + pot.eval_V(pts, check_box=False)))
    return math.sqrt(max(2 * (energy - v_min), 0.0)) + 6 * math.sqrt(eps)


def resolution_violations(cfg):
    """Cross-field rules that depend on eps: coherent width, momentum window, time step."""
    out = []
    spec = cfg.grid_spec or {}
    if "n" in spec:
        n = spec["n"]
        ns = [n] * cfg.potential.dim if isinstance(n, int) else list(n)
        if len(ns) != cfg.potential.dim:
            return [("grid_dimension", f"grid has {len(ns)} axes, potential has {cfg.potential.dim}")]
        bad = [(i, m) for i, m in enumerate(ns) if m & (m - 1)]
        if bad:
            return [("power_of_two", f"axis {i}: n={m} is not a power of two") for i, m in bad]
    for eps in cfg.eps_list:
        grid = cfg.grid_for(eps)
        if "n" in spec:
            reach = momentum_reach(cfg.potential, cfg.initial, eps)
            for i, (lo, hi, n) in enumerate(grid.axes):
                need = min_points(hi - lo, reach, eps)
                if n < need:
                    out.append(("momentum_window",
                                f"eps={eps:g}, axis {i}: n={n} < {need} needed for |xi| <= {reach:.3g}"))
                if cfg.initial.kind == "coherent" and (hi - lo) / n > math.sqrt(eps) / 4:
                    out.append(("coherent_width",
                                f"eps={eps:g}, axis {i}: dx={(hi - lo) / n:.4g} > sqrt(eps)/4={math.sqrt(eps) / 4:.4g}"))
        if cfg.dt is not None:
            limit = dt_max(cfg.potential, grid)
            if cfg.dt > limit * (1 + 1e-12):
                out.append(("dt_max", f"eps={eps:g}: dt={cfg.dt:g} exceeds dt_max={limit:.4g}"))
    return out


def config_from_dict(raw):
    """Validate a parsed configuration and build a :class:`RunConfig`."""
    violations = schema_violations(raw)
    if violations:
        raise SchemaViolation(violations)
    pspec = dict(raw["potential"])
    expect = pspec.pop("expect_crossings", False)
    try:
        pot = potential_from_spec(pspec)
    except ValueError as exc:
        raise SchemaViolation([("/potential", str(exc))]) from exc
    d = pot.dim
    ispec = raw["initial_state"]
    problems = []
    if ispec["kind"] == "coherent":
        for key in ("q", "p"):
            if key not in ispec:
                problems.append((f"/initial_state/{key}", f"'{key}' is a required property"))
            elif len(ispec[key]) != d:
                problems.append((f"/initial_state/{key}", f"expected {d} components"))
    symbols = []
    for k, s in enumerate(raw.get("symbols", [])):
        try:
            symbols.append(symbol_from_spec(dict(s, id=s.get("id", f"s{k}")), d))
        except (KeyError, ValueError, TypeError) as exc:
            problems.append((f"/symbols/{k}", f"invalid symbol: {exc}"))
    if problems:
        raise SchemaViolation(problems)
    initial = InitialStateSpec.from_spec(ispec, d)
    rules = []
    try:
        pot.check_rank()
    except ValueError as exc:
        rules.append(("rank", str(exc)))
    if expect:
        try:
            pot.check_positive_weight()
        except ValueError as exc:
            rules.append(("positive_weight", str(exc)))
    tspec = raw["time"]
    cfg = RunConfig(
        raw=raw, potential=pot, initial=initial, t_final=float(tspec["t_final"]),
        eps_list=[float(e) for e in raw["eps_list"]], dt=tspec.get("dt"),
        snapshots=list(tspec.get("snapshots", [])), n_samples=int(tspec.get("n_samples", 201)),
        symbols=symbols, diagnostics=dict(raw.get("diagnostics", {})), grid_spec=raw.get("grid"),
        seed=int(raw.get("seed", 0)), output=raw.get("output", "out"))
    if any(t > cfg.t_final for t in cfg.snapshots):
        rules.append(("snapshot_times", "snapshot times must not exceed t_final"))
    rules += resolution_violations(cfg)
    if rules:
        raise ResolutionRuleViolation(rules)
    return cfg


def load_config(path):
    """Read, parse and validate a JSON configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaViolation([("/", "configuration must be a JSON object")])
    return config_from_dict(raw)

