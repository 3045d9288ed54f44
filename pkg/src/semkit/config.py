"""
Case files: JSON documents validated against a published schema.

Unknown keys are errors. Numeric mesh extents may be given as numbers or
as expressions ("2*pi"). Input files named in a case (machine specs)
resolve against the case file's directory; outputs go under
``output.dir`` relative to the working directory.
"""
import json
import os

import jsonschema

from .expr import ExpressionError, compile_expr

__all__ = ["CASE_SCHEMA", "ConfigError", "load_case", "validate_case", "expand_defaults", "number"]


class ConfigError(ValueError):
    pass


_num_or_expr = {"type": ["number", "string"]}
_expr_map = {
    "type": "object",
    "additionalProperties": False,
    "properties": {c: _num_or_expr for c in ("u", "v", "w", "p")},
}

CASE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "semkit case",
    "type": "object",
    "additionalProperties": False,
    "required": ["mesh", "discretization"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "mesh": {
            "type": "object",
            "additionalProperties": False,
            "required": ["elements"],
            "properties": {
                "elements": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                "extents": {
                    "type": "array",
                    "minItems": 3,
                    "maxItems": 3,
                    "items": {"type": "array", "items": _num_or_expr, "minItems": 2, "maxItems": 2},
                },
                "periodic": {"type": "array", "items": {"type": "boolean"}, "minItems": 3, "maxItems": 3},
            },
        },
        "discretization": {
            "type": "object",
            "additionalProperties": False,
            "required": ["N"],
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "t_end": {"type": "number", "minimum": 0},
                "steps": {"type": "integer", "minimum": 0},
                "bdf_order": {"type": "integer", "minimum": 1, "maximum": 3},
                "startup": {"enum": ["richardson", "plain"]},
            },
        },
        "physics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "Re": {"type": "number", "exclusiveMinimum": 0},
                "initial": {"oneOf": [{"enum": ["tgv", "rest"]}, _expr_map]},
                "forcing": _expr_map,
                "boundary": _expr_map,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "pressure_tol": {"type": "number", "exclusiveMinimum": 0},
                "velocity_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "restart": {"type": "integer", "minimum": 1},
                "projection_dim": {"type": "integer", "minimum": 0},
                "coarse_iter": {"type": "integer", "minimum": 1},
                "pressure_precon": {"enum": ["schwarz", "jacobi"]},
                "pressure_rhs": {"enum": ["explicit", "bdf"]},
            },
        },
        "execution": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "P": {"type": "integer", "minimum": 1},
                "deterministic": {"type": "boolean"},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "cadence": {"type": "integer", "minimum": 1},
                "timeseries": {"type": "string"},
                "field_dump": {"type": ["string", "null"]},
                "ledger": {"type": ["string", "null"]},
                "poisson": {"type": "string"},
                "model": {"type": "string"},
                "projection": {"type": "string"},
            },
        },
        "poisson": {
            "type": "object",
            "additionalProperties": False,
            "required": ["solution"],
            "properties": {
                "solution": _num_or_expr,
                "forcing": _num_or_expr,
                "orders": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cost": {"enum": ["analytic", "run"]},
                "E": {"type": "integer", "minimum": 1},
                "N": {"type": "integer", "minimum": 1},
                "i": {"type": "integer", "minimum": 0},
                "j": {"type": "integer", "minimum": 0},
                "m": {"type": "integer", "minimum": 0},
                "k": {"type": "integer", "minimum": 1, "maximum": 3},
                "restart": {"type": "integer", "minimum": 1},
                "projection_dim": {"type": "integer", "minimum": 0},
                "n_unique": {"type": "integer", "minimum": 1},
                "n_unique_coarse": {"type": "integer", "minimum": 1},
                "coarse_iters": {
                    "oneOf": [
                        {"type": "integer", "minimum": 0},
                        {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    ]
                },
                "gmres_cycles": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "projection_added": {"type": "boolean"},
                "run_steps": {"type": "integer", "minimum": 1},
                "machines": {"type": "array", "items": {"type": "string"}},
                "pmin": {"type": "integer", "minimum": 1},
                "pmax": {"type": "integer", "minimum": 1},
                "trials": {"type": "integer", "minimum": 1},
                "expected": {"type": "boolean"},
                "surface": {"enum": ["per_pe", "literal"]},
            },
        },
    },
}

_DEFAULTS = {
    "mesh": {"extents": [[0, 1], [0, 1], [0, 1]], "periodic": [False, False, False]},
    "discretization": {"bdf_order": 3, "startup": "richardson"},
    "physics": {"Re": 1.0, "initial": "rest"},
    "solver": {
        "pressure_tol": 1e-7,
        "velocity_tol": 1e-9,
        "max_iter": 500,
        "restart": 30,
        "projection_dim": 20,
        "coarse_iter": 10,
        "pressure_precon": "schwarz",
        "pressure_rhs": "explicit",
    },
    "execution": {"P": 1, "deterministic": True, "seed": 0},
    "output": {
        "dir": ".",
        "cadence": 1,
        "timeseries": "timeseries.csv",
        "field_dump": None,
        "ledger": "ledger.csv",
        "poisson": "poisson.csv",
        "model": "model.csv",
        "projection": "projection.csv",
    },
    "poisson": {"orders": [2, 4, 6, 8], "tol": 1e-12},
    "model": {
        "cost": "analytic",
        "i": 20,
        "j": 30,
        "m": 10,
        "coarse_iters": 10,
        "run_steps": 1,
        "machines": [],
        "pmin": 1,
        "pmax": None,
        "trials": 1000,
        "expected": False,
        "surface": "per_pe",
    },
}


def number(v):
    """Number or constant expression to float."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    try:
        return float(compile_expr(v)(0.0, 0.0, 0.0))
    except ExpressionError as exc:
        raise ConfigError(str(exc)) from None


def validate_case(doc):
    try:
        jsonschema.validate(doc, CASE_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    # expressions are checked eagerly so errors surface before any work
    for block in ("physics",):
        for key, val in doc.get(block, {}).items():
            if isinstance(val, dict):
                for c, src in val.items():
                    try:
                        compile_expr(src)
                    except ExpressionError as exc:
                        raise ConfigError(f"{block}/{key}/{c}: {exc}") from None
    if "poisson" in doc:
        for key in ("solution", "forcing"):
            if key in doc["poisson"]:
                try:
                    compile_expr(doc["poisson"][key])
                except ExpressionError as exc:
                    raise ConfigError(f"poisson/{key}: {exc}") from None
    for lo, hi in doc["mesh"].get("extents", _DEFAULTS["mesh"]["extents"]):
        if not number(hi) > number(lo):
            raise ConfigError("mesh/extents: each upper bound must exceed its lower bound")
    return doc


def expand_defaults(doc):
    out = {k: v for k, v in doc.items() if k not in _DEFAULTS}
    for key, block in _DEFAULTS.items():
        out[key] = {**block, **doc.get(key, {})}
    return out


def load_case(path):
    """Read, validate and default-expand a case file. Raises OSError or ConfigError."""
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    validate_case(doc)
    case = expand_defaults(doc)
    case["_base_dir"] = os.path.dirname(os.path.abspath(path))
    return case
