"""Experiment configuration: JSON schema, defaults, hashing and named RNG streams."""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from pathlib import Path

import jsonschema
import numpy as np

STREAMS = ("dataset", "decoder", "train", "attack", "eval")


class ConfigError(ValueError):
    pass


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_pos_int = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}

SCHEMA = _obj({
    "experiment_id": {"type": "string", "minLength": 1},
    "dataset": _obj({
        "mode": {"enum": ["gaussian_palette", "rgb_restricted", "uniform_random", "toy"]},
        "sigma": _nonneg,
        "rgb_weights": {"oneOf": [{"enum": ["unbiased", "99% red", "99.9% red"]},
                                  {"type": "array", "items": _nonneg, "minItems": 3, "maxItems": 3}]},
        "seed": {"type": "integer", "minimum": 0},
        "n_train": _pos_int,
        "n_test": _pos_int,
        "test_mode": {"enum": ["gaussian_palette", "rgb_restricted", "uniform_random"]},
        "idx_dir": {"type": "string"},
    }, required=["mode"]),
    "decoder": _obj({
        "kind": {"enum": ["procedural", "learned", "toy"]},
        "bias_profile": {"enum": ["unbiased", "less_biased", "more_biased"]},
        "train_params": _obj({
            "epochs": _pos_int, "hidden": _pos_int, "d_par": _pos_int,
            "lr": {"type": "number", "exclusiveMinimum": 0}, "batch_size": _pos_int,
        }),
        "encode": _obj({"N": _pos_int, "M": _pos_int, "step": {"type": "number", "exclusiveMinimum": 0},
                        "feature_epochs": _pos_int}),
    }, required=["kind"]),
    "regime": _obj({
        "regime": {"enum": ["nominal", "at", "mixup", "randmix", "advmix"]},
        "epochs": _pos_int, "batch_size": _pos_int, "lr": {"type": "number", "exclusiveMinimum": 0},
        "arch": {"enum": ["linear", "mlp2"]},
        "at_epsilon": _nonneg, "at_steps": _pos_int, "at_step_size": {"type": "number", "exclusiveMinimum": 0},
        "mixup_alpha": {"type": "number", "exclusiveMinimum": 0},
    }),
    "attack": _obj({
        "N_r": _pos_int, "K": _pos_int, "alpha": {"type": "number", "exclusiveMinimum": 0},
        "epsilon": {"type": "number", "exclusiveMinimum": 0}, "simplex": {"type": "boolean"},
    }),
    "eval": _obj({
        "N_r": _pos_int, "K": _pos_int, "grid": {"enum": ["rgb", "cube"]},
        "n_eval": _pos_int, "n_images": {"type": "integer", "minimum": 0},
    }),
    "output": _obj({"dir": {"type": "string"}}),
}, required=["dataset", "decoder"])

DEFAULTS = {
    "experiment_id": "experiment",
    "dataset": {"sigma": 0.0, "rgb_weights": "unbiased", "seed": 0, "n_train": 2000, "n_test": 1000,
                "test_mode": "uniform_random"},
    "decoder": {"bias_profile": "unbiased",
                "train_params": {"epochs": 20, "hidden": 256, "d_par": 16, "lr": 3e-3, "batch_size": 64},
                "encode": {"N": 100, "M": 256, "step": 0.05, "feature_epochs": 3}},
    "regime": {"regime": "nominal", "epochs": 5, "batch_size": 64, "lr": 1e-3, "arch": "mlp2"},
    "attack": {"N_r": 5, "K": 10, "epsilon": 0.03, "simplex": False},
    "eval": {"N_r": 10, "K": 10, "grid": "cube", "n_eval": 1000, "n_images": 8},
    "output": {"dir": "out"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    """Schema-check a raw config and return it with defaults filled in."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {e.message}") from None
    full = _merge(DEFAULTS, cfg)
    if isinstance(full["dataset"]["rgb_weights"], list) and not np.isclose(sum(full["dataset"]["rgb_weights"]), 1):
        raise ConfigError("config error at dataset/rgb_weights: must sum to 1")
    return full


def load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return validate(raw)


def canonical(cfg: dict) -> bytes:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg: dict) -> str:
    """Hash of the experiment-defining sections; where the outputs go is left out."""
    return hashlib.sha256(canonical({k: v for k, v in cfg.items() if k != "output"})).hexdigest()[:16]


def stream(seed: int, name: str, sub: int = 0) -> np.random.Generator:
    """Independent generator per (seed, component name, sub-index)."""
    if name not in STREAMS:
        raise ValueError(f"unknown stream {name!r}")
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), int(sub)])


def echo(cfg: dict, directory, stem: str = "config", artifacts=()) -> Path:
    """Write the exact config beside the artifacts plus a sha256sum-style manifest
    covering the config and every artifact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    p = directory / f"{stem}.json"
    p.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    lines = [f"{hashlib.sha256(Path(a).read_bytes()).hexdigest()}  {Path(a).name}" for a in (p, *artifacts)]
    (directory / f"{stem}.sha256").write_text("\n".join(lines) + "\n")
    return p
