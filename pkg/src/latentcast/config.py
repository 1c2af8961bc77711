"""Run configuration: built-in profiles, TOML/JSON files, schema validation."""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema
import tomli

from .checkpoint import config_hash
from .errors import ConfigError

PROFILES = ("desk", "paper")
# GroupNorm eps for both profiles; a large value keeps attributions well conditioned near a zero baseline
PROFILE_NORM_EPS = 1.0

_pos = {"type": "integer", "minimum": 1}
_num = {"type": "number"}
_posnum = {"type": "number", "exclusiveMinimum": 0}
_bool = {"type": "boolean"}


def _ints(min_items=1, minimum=1):
    return {"type": "array", "items": {"type": "integer", "minimum": minimum}, "minItems": min_items}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string", "minLength": 1},
    "data": _obj({
        "path": {"type": ["string", "null"]},
        "split": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "climatology": {"enum": ["simple", "seasonal"]},
        "synthetic": _obj({
            "C": _pos, "c": _pos, "H": _pos, "W": _pos, "T": _pos,
            "coupling": _num, "diffusion": _num, "damping": _num, "forcing": _num, "cycle": _num,
            "noise_sigma": {"type": "number", "minimum": 0},
            "dt_hours": _posnum, "t0": {"type": "string"}, "spinup": {"type": "integer", "minimum": 0},
        }),
    }),
    "model": _obj({
        "d": _pos,
        "encoder_widths": _ints(0), "decoder_widths": _ints(1),
        "vit": _obj({
            "patch_size": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
            "embed_dim": _pos, "depth": _pos, "heads": _pos, "mlp_ratio": _pos,
        }),
        "cycles_days": {"type": "array", "items": _posnum, "minItems": 1},
        "time_hidden": _pos, "embed_channels": _pos,
        "intervals": _ints(1), "temporal_residual": _bool, "norm_eps": _posnum,
    }),
    "train": _obj({
        "epochs": _pos, "curriculum": _ints(1), "boundaries": _ints(2, minimum=0),
        "lr0": _posnum, "lr_decay": _posnum, "lr_decay_every": _pos, "lr_decay_until": {"type": "integer", "minimum": 0},
        "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": _pos,
        "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "intervals": _ints(1),
        "steps_per_epoch": {"type": ["integer", "null"], "minimum": 1},
        "lead_weights": {"type": ["array", "null"], "items": {"type": "number", "minimum": 0}},
        "detach_latent_target": _bool,
        "val_batches": {"type": "integer", "minimum": 0},
    }),
    "forecast": _obj({"init_time": {"type": ["string", "null"]}, "steps": _pos}),
    "evaluate": _obj({
        "horizon": _pos,
        "init_hours": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 23}, "minItems": 1},
        "max_inits": {"type": ["integer", "null"], "minimum": 1},
        "plot_format": {"enum": ["png", "svg", "pdf"]},
    }),
    "attribute": _obj({
        "steps": _pos, "target": {"enum": ["key", "latent"]},
        "sample_time": {"type": ["string", "null"]}, "top_k": _pos,
    }),
    "plan": _obj({"n": _pos}),
})

_COMMON = {
    "seed": 0,
    "out": "runs",
    "data": {"path": None, "split": [0.8, 0.1], "climatology": "simple",
             "synthetic": {"C": 12, "c": 4, "H": 16, "W": 32, "T": 2000}},
    "forecast": {"init_time": None, "steps": 60},
    "evaluate": {"horizon": 60, "init_hours": [0, 12], "max_inits": None, "plot_format": "png"},
    "attribute": {"steps": 64, "target": "key", "sample_time": None, "top_k": 2},
    "plan": {"n": 60},
}

_PROFILE_OVERRIDES = {
    "desk": {
        "model": {"d": 8, "encoder_widths": [32, 24, 16], "decoder_widths": [16, 32, 32, 32],
                  "vit": {"patch_size": [4, 4], "embed_dim": 64, "depth": 2, "heads": 4, "mlp_ratio": 4},
                  "norm_eps": PROFILE_NORM_EPS},
        "train": {"epochs": 4, "curriculum": [2, 4, 6, 8], "boundaries": [0, 1, 2, 3, 4],
                  "lr0": 1e-3, "batch_size": 8, "steps_per_epoch": 150},
        "evaluate": {"max_inits": 40},
    },
    "paper": {
        "model": {"d": 24, "encoder_widths": [64, 48, 32], "decoder_widths": [48, 64, 64, 64],
                  "vit": {"patch_size": [4, 4], "embed_dim": 768, "depth": 8, "heads": 12, "mlp_ratio": 4},
                  "norm_eps": PROFILE_NORM_EPS},
        "train": {"epochs": 65, "curriculum": [2, 4, 6, 8], "boundaries": [0, 50, 55, 60, 65],
                  "lr0": 2e-4, "batch_size": 32, "steps_per_epoch": None},
    },
}


def merge(base: dict, over: dict) -> dict:
    """Recursive dict merge; values in ``over`` win, lists are replaced whole."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def profile_defaults(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    cfg = merge(_COMMON, _PROFILE_OVERRIDES[name])
    cfg.setdefault("model", {})
    cfg.setdefault("train", {})
    return cfg


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    try:
        if path.suffix.lower() == ".toml":
            return tomli.loads(raw.decode())
        if path.suffix.lower() == ".json":
            return json.loads(raw)
    except (tomli.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot parse {path.name}: {e}") from e
    raise ConfigError(f"config must be .toml or .json, got {path.name}")


def validate(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from None
    return cfg


def resolve(profile: str = "desk", path=None, overrides: dict | None = None) -> dict:
    """Profile defaults, then the file, then flag overrides; validated after each layer."""
    cfg = profile_defaults(profile)
    if path is not None:
        cfg = merge(cfg, validate(read_config_file(path)))
    if overrides:
        cfg = merge(cfg, overrides)
    return validate(cfg)


def run_hash(command: str, cfg: dict, extra: dict | None = None) -> str:
    """Hash identifying a run directory; the output root is excluded."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return config_hash({"command": command, "config": body, "extra": extra or {}})
