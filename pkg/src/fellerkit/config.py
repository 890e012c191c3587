"""Experiment configuration: defaults, JSON schema, validation.

Configs are plain JSON. Every object level sets
``additionalProperties: false``, so unknown keys are rejected rather than
silently ignored. Each subcommand deep-merges the user file over its
defaults and validates the merged result. The schema below is the
in-repo documentation of the format.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

_NUMBER = {"type": "number"}
_MATRIX = {"type": "array", "items": {"type": "array", "items": _NUMBER}}
_VECTOR = {"type": "array", "items": _NUMBER}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "drift": _MATRIX,
                "noise": _MATRIX,
            },
        },
        "heat": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modes": {"type": "integer", "minimum": 8},
                "diffusivity": {"type": "number", "exclusiveMinimum": 0},
                "noise_exponent": {"type": "number", "minimum": 0},
                "phys_grid_factor": {"type": "integer", "minimum": 1},
            },
        },
        "drift": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["zero", "constant", "clipped-linear", "sign",
                                  "mollified-sign"]},
                "value": _VECTOR,
                "gain": _MATRIX,
                "bound": _NUMBER,
                "amplitude": _NUMBER,
                "sharpness": _NUMBER,
            },
            "required": ["kind"],
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lo": _VECTOR,
                "hi": _VECTOR,
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 8}},
            },
        },
        "mc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "n_paths": {"type": "integer", "minimum": 1000},
                "burn_in": _NUMBER,
                "horizon": _NUMBER,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "target_rho": {"type": "number", "exclusiveMinimum": 0,
                               "exclusiveMaximum": 1},
                "nodes": {"type": "integer", "minimum": 2},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "times": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": _NUMBER,
                "scaling_window": {"type": "array", "items": _NUMBER,
                                   "minItems": 2, "maxItems": 2},
                "scaling_points": {"type": "integer", "minimum": 4},
                "mixing_grid": _VECTOR,
            },
        },
    },
}

DEFAULTS: dict[str, dict] = {
    "kalman": {
        "times": {"scaling_window": [1e-4, 1e-1], "scaling_points": 12},
    },
    "perturb": {
        "model": {"drift": [[-1.0]], "noise": [[1.0]]},
        "drift": {"kind": "constant", "value": [1.0]},
        "grid": {"lo": [-6.0], "hi": [6.0], "counts": [256]},
        "solver": {"target_rho": 0.5, "nodes": 32, "tol": 1e-10},
        "times": {"horizon": 1.0},
    },
    "mc-validate": {
        "model": {"drift": [[-1.0]], "noise": [[1.0]]},
        "drift": {"kind": "sign", "amplitude": 0.5},
        "grid": {"lo": [-6.0], "hi": [6.0], "counts": [256]},
        "solver": {"target_rho": 0.5, "nodes": 32, "tol": 1e-10},
        "mc": {"dt": 0.00390625, "n_paths": 100000},
        "times": {"horizon": 1.0},
    },
    "invariant": {
        "model": {"drift": [[-1.0]], "noise": [[1.0]]},
        "drift": {"kind": "sign", "amplitude": 0.5},
        "grid": {"lo": [-6.0], "hi": [6.0], "counts": [128]},
        "solver": {"target_rho": 0.5, "nodes": 24, "tol": 1e-10},
        "mc": {"dt": 0.02, "n_paths": 8192, "burn_in": 5.0, "horizon": 60.0},
        "times": {"mixing_grid": [0.5, 1.0, 2.0, 4.0]},
    },
    "heat": {
        "heat": {"modes": 128, "diffusivity": 1.0, "noise_exponent": 0.0,
                 "phys_grid_factor": 2},
        "mc": {"dt": 0.01, "n_paths": 64, "burn_in": 2.0, "horizon": 30.0},
        "times": {"horizon": 1.0, "scaling_window": [1e-4, 1e-2],
                  "scaling_points": 10},
    },
}

QUICK_OVERRIDES: dict[str, dict] = {
    "kalman": {},
    "perturb": {
        "grid": {"counts": [128]},
        "solver": {"nodes": 12},
    },
    "mc-validate": {
        "grid": {"counts": [128]},
        "solver": {"nodes": 12},
        "mc": {"dt": 0.015625, "n_paths": 20000},
    },
    "invariant": {
        "grid": {"counts": [64]},
        "solver": {"nodes": 10},
        "mc": {"n_paths": 2048, "burn_in": 2.0, "horizon": 20.0},
    },
    "heat": {
        "heat": {"modes": 32},
        "mc": {"n_paths": 32, "horizon": 10.0},
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(command: str, path: str | Path | None = None,
                quick: bool = False) -> dict:
    """Merged, validated config for one subcommand."""
    if command not in DEFAULTS:
        raise ValueError(f"unknown command {command!r}")
    cfg = copy.deepcopy(DEFAULTS[command])
    if quick:
        cfg = _deep_merge(cfg, QUICK_OVERRIDES[command])
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        jsonschema.validate(user, CONFIG_SCHEMA)
        cfg = _deep_merge(cfg, user)
    jsonschema.validate(cfg, CONFIG_SCHEMA)
    return cfg


def config_hash(cfg: dict, seed: int) -> str:
    """Short stable digest of (config, seed) for CSV headers."""
    payload = json.dumps({"config": cfg, "seed": seed}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]
