"""Experiment configuration: JSON schema, built-in registries and object builders."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

import jsonschema
import numpy as np

from .mpp import HazardModel, build_model
from .problem import (BsdeProblem, beta_threshold, Generator, Terminal, constant_terminal, count_terminal, depth_terminal,
                      last_mark_terminal, linear_generator, martingale_generator, smooth_generator,
                      zero_generator)

STAGES = ("solve", "validate-ito", "validate-apriori", "picard-trace", "truncation-sweep",
          "control-solve", "control-verify")

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["seed", "model", "stages"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "stages": {"type": "array", "minItems": 1, "items": {"enum": list(STAGES)}},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["kind", "horizon", "marks"],
            "properties": {
                "kind": {"enum": ["poisson", "single_jump", "markov_hazard"]},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "marks": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                "sentinel": {"type": "string"},
                "mark_probs": {"type": "array", "items": _num},
                "rate": {"type": "number", "minimum": 0},
                "markov": {"type": "boolean"},
            },
        },
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "p": {"type": "number", "exclusiveMinimum": 1},
                "beta": {"oneOf": [_num, {"const": "auto"}]},
                "beta_factor": {"type": "number", "exclusiveMinimum": 0},
                "L": {"type": "number", "minimum": 0},
                "Lprime": {"type": "number", "minimum": 0},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "allow_subthreshold": {"type": "boolean"},
                "generator": {
                    "type": "object",
                    "required": ["name"],
                    "properties": {"name": {"enum": ["zero", "martingale", "linear", "smooth"]}},
                },
                "terminal": {
                    "type": "object",
                    "required": ["name"],
                    "properties": {"name": {"enum": ["constant", "count", "last-mark", "by-depth"]}},
                },
            },
        },
        "control": {
            "type": "object",
            "required": ["actions", "r", "l", "g", "Cr", "Cl"],
            "properties": {
                "actions": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                "r": {"type": "object"},
                "l": {"type": "object"},
                "g": {"type": "object"},
                "Cr": {"type": "number", "exclusiveMinimum": 0},
                "Cl": {"type": "number", "exclusiveMinimum": 0},
                "p": {"type": "number", "exclusiveMinimum": 1},
                "time_grid": {"type": "array", "items": _num},
                "beta": {"oneOf": [_num, {"const": "auto"}]},
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"m": _pos_int, "grid_size": {"type": "integer", "minimum": 2},
                           "node_budget": _pos_int},
        },
        "validation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ito_trajectories": _pos_int,
                "ito_tolerance": _num,
                "ito_refine": {"type": "boolean"},
                "apriori_grid_sizes": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "picard_iterations": _pos_int,
                "picard_tolerance": _num,
                "picard_pairs": {"type": "integer", "minimum": 0},
                "truncation_m_list": {"type": "array", "items": _pos_int},
                "truncation_samples": _pos_int,
                "truncation_m_large": _pos_int,
                "control_samples": _pos_int,
                "random_controls": {"type": "integer", "minimum": 0},
                "allowance": _num,
            },
        },
    },
}

DEFAULT_SOLVER = {"m": 3, "grid_size": 201, "node_budget": 10**7}
DEFAULT_VALIDATION = {
    "ito_trajectories": 100, "ito_tolerance": 5e-3, "ito_refine": False, "apriori_grid_sizes": [],
    "picard_iterations": 30, "picard_tolerance": 1e-6, "picard_pairs": 20, "truncation_m_list": [1, 2, 3],
    "truncation_samples": 20000, "control_samples": 20000, "random_controls": 20, "allowance": 2e-2,
}


class ConfigError(ValueError):
    """Schema or semantic error; ``pointer`` is the JSON pointer of the offending field."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.message = message


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def validate_config(cfg: dict) -> list[ConfigError]:
    """All schema violations, each with the JSON pointer of the field at fault."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(v.iter_errors(cfg), key=lambda e: list(e.absolute_path)):
        parts = list(err.absolute_path)
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            for k in missing:
                out.append(ConfigError(_pointer(parts + [k]), f"required field {k!r} is missing"))
            continue
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            for k in extra:
                out.append(ConfigError(_pointer(parts + [k]), "unknown field"))
            continue
        out.append(ConfigError(_pointer(parts), err.message))
    return out


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON form (stable under key reordering)."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """``a.b.c=value`` updates; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError("", f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(_pointer(parts), "cannot set a field inside a non-object")
        node[parts[-1]] = val
    return cfg


def build_generator(spec: dict) -> Generator:
    name = spec["name"]
    kw = {k: float(v) for k, v in spec.items() if k != "name"}
    if name == "zero":
        return zero_generator()
    if name == "martingale":
        return martingale_generator()
    if name == "linear":
        return linear_generator(**kw)
    if name == "smooth":
        return smooth_generator(**kw)
    raise ConfigError("/problem/generator/name", f"unknown generator {name!r}")


def build_terminal(spec: dict) -> Terminal:
    name = spec["name"]
    if name == "constant":
        return constant_terminal(float(spec.get("value", 1.0)))
    if name == "count":
        return count_terminal()
    if name == "last-mark":
        if "mark" not in spec:
            raise ConfigError("/problem/terminal/mark", "required field 'mark' is missing")
        return last_mark_terminal(spec["mark"])
    if name == "by-depth":
        if "values" not in spec:
            raise ConfigError("/problem/terminal/values", "required field 'values' is missing")
        return depth_terminal(spec["values"])
    raise ConfigError("/problem/terminal/name", f"unknown terminal {name!r}")


def _default_lipschitz(spec: dict) -> tuple[float, float]:
    """(L, L') implied by a built-in generator's parameters."""
    name = spec["name"]
    if name == "martingale":
        return 1.0, 0.0
    if name == "smooth":
        return 1.0 + abs(float(spec.get("b", 0.0))), abs(float(spec.get("a_y", 0.0)))
    if name == "linear":
        return abs(float(spec.get("a_z", 0.0))) + abs(float(spec.get("a_int", 0.0))), abs(float(spec.get("a_y", 0.0)))
    return 0.0, 0.0


def build_problem(model: HazardModel, spec: dict) -> BsdeProblem:
    """``beta_factor`` (if given) sets ``beta`` to that multiple of the threshold."""
    spec = dict(spec)
    gspec = spec.pop("generator", {"name": "martingale"})
    gen = build_generator(gspec)
    term = build_terminal(spec.pop("terminal", {"name": "constant", "value": 1.0}))
    L, Lp = _default_lipschitz(gspec)
    kw = {"p": 2.0, "beta": "auto", "L": L, "Lprime": Lp, "eps": 1.0}
    factor = spec.pop("beta_factor", None)
    kw.update(spec)
    if factor is not None:
        kw["beta"] = float(factor) * beta_threshold(kw["p"], kw["eps"], kw["L"], kw["Lprime"])
    try:
        return BsdeProblem(model, gen, term, **kw)
    except ValueError as e:
        raise ConfigError("/problem/beta", str(e)) from None


def build_control(model: HazardModel, spec: dict):
    from .control import ControlProblem

    ms = model.markspace
    states = list(ms.marks) + [ms.sentinel]
    acts = spec["actions"]
    K = len(ms)

    def row(table, a, names, where):
        if a not in table:
            raise ConfigError(f"/control/{where}/{a}", "missing action row")
        v = table[a]
        if isinstance(v, dict):
            missing = [n for n in names if n not in v]
            if missing:
                raise ConfigError(f"/control/{where}/{a}/{missing[0]}", "missing entry")
            return [v[n] for n in names]
        if isinstance(v, (int, float)):
            return [v] * len(names)
        if len(v) != len(names):
            raise ConfigError(f"/control/{where}/{a}", f"expected {len(names)} entries")
        return v

    r = np.array([row(spec["r"], a, list(ms.marks), "r") for a in acts], dtype=float)
    l = np.array([row(spec["l"], a, states, "l") for a in acts], dtype=float)
    g = np.array([float(spec["g"].get(s, 0.0)) for s in states])
    try:
        return ControlProblem(model, acts, r, l, g, float(spec["Cr"]), float(spec["Cl"]), float(spec.get("p", 2.0)),
                              spec.get("time_grid"))
    except ValueError as e:
        raise ConfigError("/control", str(e)) from None


@dataclass
class ExperimentConfig:
    raw: dict
    model: HazardModel
    problem: BsdeProblem | None
    control: object | None
    solver: dict
    validation: dict
    seed: int
    output_dir: str
    stages: list

    @classmethod
    def from_dict(cls, cfg: dict, output_dir: str | None = None) -> "ExperimentConfig":
        errs = validate_config(cfg)
        if errs:
            raise errs[0]
        try:
            mspec = cfg["model"]
            model = build_model(mspec, mspec.get("markov"))
        except (ValueError, KeyError) as e:
            raise ConfigError("/model", str(e)) from None
        stages = list(cfg["stages"])
        needs_problem = any(s in stages for s in STAGES[:5])
        problem = build_problem(model, cfg.get("problem", {})) if needs_problem else None
        control = None
        if any(s.startswith("control") for s in stages):
            if "control" not in cfg:
                raise ConfigError("/control", "required field 'control' is missing for control stages")
            control = build_control(model, cfg["control"])
        solver = {**DEFAULT_SOLVER, **cfg.get("solver", {})}
        val = {**DEFAULT_VALIDATION, **cfg.get("validation", {})}
        out = output_dir or cfg.get("output_dir") or f"runs/{cfg.get('name', 'run')}"
        return cls(cfg, model, problem, control, solver, val, int(cfg["seed"]), out, stages)


def load_config(path, overrides: list[str] | None = None) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError("", f"invalid JSON: {e}") from None
    return apply_overrides(cfg, overrides or [])
