"""Experiment configuration: JSON schema, defaults and validation.

A config has five sections: ``env``, ``learner``, ``options``, ``features``
and ``harness``.  Unknown keys anywhere are rejected.  ``load_config``
returns a fully populated plain dict; ``config_hash`` fingerprints the parts
that determine the learning curves.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_OPT_POS = {"type": ["number", "null"], "exclusiveMinimum": 0}
_COUNT = {"type": "integer", "minimum": 1}


def _section(properties, required=()):
    return {"type": "object", "properties": properties, "required": list(required),
            "additionalProperties": False}


SCHEMA = _section({
    "env": _section({
        "name": {"enum": ["four_rooms", "mountain_car_sparse"]},
        "params": {"type": "object"},
        "transfer": {"oneOf": [
            {"type": "null"},
            _section({"episode": {"type": "integer", "minimum": 0}}, ["episode"]),
            _section({"fraction": {"type": "number", "minimum": 0, "maximum": 1}}, ["fraction"]),
        ]},
    }, ["name"]),
    "learner": _section({
        "algorithm": {"enum": ["MOC", "OC", "AC"]},
        "eta": _PROB,
        "lr": _POS,
        "lr_values": _OPT_POS,
        "lr_policy": _OPT_POS,
        "lr_termination": _OPT_POS,
        "lr_meta": _OPT_POS,
        "discount": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "n_step": _COUNT,
        "is_ratio_cap": _OPT_POS,
        "policy_is_correction": {"type": "boolean"},
        "action_ratio_on_bootstrap": {"type": "boolean"},
        "value_loss_coef": _POS,
    }, ["algorithm"]),
    "options": _section({
        "kind": {"enum": ["learned", "hallway"]},
        "n_options": _COUNT,
        "meta": {"enum": ["softmax_q", "param"]},
        "tau": _POS,
        "epsilon_mu": _PROB,
        "epsilon_action": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "hallway_termination": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "init_scale": {"type": "number", "minimum": 0},
    }),
    "features": _section({
        "kind": {"enum": ["one_hot", "rbf"]},
        "radii": {"type": "array", "items": _POS, "minItems": 1},
        "kernels_per_radius": _COUNT,
        "n_samples": {"type": "integer", "minimum": 1000},
        "hidden": _COUNT,
    }),
    "harness": _section({
        "n_seeds": _COUNT,
        "seed": {"type": "integer", "minimum": 0},
        "episodes": _COUNT,
        "timesteps": _COUNT,
        "output_dir": {"type": "string"},
        "info_radius_every": {"type": "integer", "minimum": 0},
        "info_radius_states": _COUNT,
        "workers": _COUNT,
        "final_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "grid": {"type": "object", "additionalProperties": {"type": "array", "minItems": 1}},
        "max_grid_runs": _COUNT,
    }),
}, ["env", "learner"])

DEFAULTS = {
    "env": {"params": {}, "transfer": None},
    "learner": {"eta": 0.3, "lr": 0.8, "lr_values": None, "lr_policy": None, "lr_termination": None,
                "lr_meta": None, "discount": 0.99, "n_step": 1, "is_ratio_cap": None,
                "policy_is_correction": True, "action_ratio_on_bootstrap": True, "value_loss_coef": 0.5},
    "options": {"kind": "learned", "n_options": 4, "meta": "softmax_q", "tau": 1.0, "epsilon_mu": 0.05,
                "epsilon_action": 0.1, "hallway_termination": 0.01, "init_scale": 0.0},
    "features": {"kind": "one_hot", "radii": [5.0, 2.0, 1.0, 0.5], "kernels_per_radius": 32,
                 "n_samples": 100_000, "hidden": 128},
    "harness": {"n_seeds": 1, "seed": 0, "output_dir": "runs/experiment", "info_radius_every": 0,
                "info_radius_states": 256, "workers": 1, "final_fraction": 0.1, "max_grid_runs": 64},
}

# harness keys that do not change any learning curve
_NON_SEMANTIC = ("output_dir", "workers", "grid", "max_grid_runs", "n_seeds", "seed")


class ConfigError(ValueError):
    pass


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "params":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(doc) -> dict:
    """Check ``doc`` against the schema and cross-field rules; return it with defaults filled in."""
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {path}: {exc.message}") from None
    cfg = _merge(DEFAULTS, doc)
    h = cfg["harness"]
    if ("episodes" in h) == ("timesteps" in h):
        raise ConfigError("config error at harness: give exactly one of 'episodes' or 'timesteps'")
    transfer = cfg["env"]["transfer"]
    if transfer is not None and "episode" in transfer:
        if "episodes" not in h or transfer["episode"] > h["episodes"]:
            raise ConfigError("config error at env/transfer/episode: transfer point outside the episode budget")
    if cfg["learner"]["algorithm"] == "AC" and cfg["options"]["kind"] == "hallway":
        raise ConfigError("config error at options/kind: the flat baseline has no options")
    if cfg["options"]["kind"] == "hallway" and cfg["env"]["name"] != "four_rooms":
        raise ConfigError("config error at options/kind: hallway options exist only in four_rooms")
    return cfg


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return validate_config(doc)


def semantic_view(cfg) -> dict:
    view = copy.deepcopy(cfg)
    for key in _NON_SEMANTIC:
        view["harness"].pop(key, None)
    return view


def config_hash(cfg) -> str:
    """SHA-256 of the learning-relevant part of a config (seeds and output settings excluded)."""
    blob = json.dumps(semantic_view(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def set_path(cfg, dotted, value):
    """Return a copy of ``cfg`` with ``"section.key"`` set to ``value``."""
    out = copy.deepcopy(cfg)
    node = out
    *parents, leaf = dotted.split(".")
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"config error at grid: unknown path {dotted!r}")
        node = node[p]
    node[leaf] = value
    return out
