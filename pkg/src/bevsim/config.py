"""Run configuration: JSON documents with documented defaults.

Every field is optional; unknown keys are rejected with their full path.
The resolved config is echoed into each output directory as
config.lock.json, from which the run can be reproduced bit for bit.
"""

from __future__ import annotations

import copy
import json
import os

from .harness import DistillConfig
from .scenegen import SceneConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {
        "seed": 42,
        "n_scenes": 512,
        "n_val_scenes": 128,
        **SceneConfig().to_json(),
    },
    "model": {
        "enc_channels": [8, 16, 32],
        "hidden": 16,
        "c_bev": 16,
        "c_fuse": 16,
        "extent": 20.0,
        "grid_cells": 40,
        "d_min": 1.0,
        "d_max": 28.0,
        "n_bins": 16,
        "gcm": {"layers": 2, "heads": 2, "points": 4, "offset_radius": 0.1},
        "share_depth_heads": False,
    },
    "distill": {
        "imd": True,
        "cmd": True,
        "mmdf": True,
        "mmdp": True,
        "gcm": True,
        "oam": True,
        "weights": {"imd": 1.0, "cmd": 1.0, "mmdf": 1.0, "mmdp": 1.0},
        "teacher_score_thresh": 0.2,
        "teacher_topk": 10,
        "qfl_beta": 2.0,
    },
    "train": {
        "epochs": 8,
        "batch_size": 8,
        "lr": 2e-3,
        "seed": 42,
    },
    "eval": {
        "thresholds": [0.5, 1.0, 2.0, 4.0],
        "score_thresh": 0.1,
        "topk": 20,
    },
    "meta": {
        "command": "",
        "backend": "",
        "data_dir": "",
        "teacher": "",
        "ckpt": "",
    },
}

_LIST_VALUED = {"enc_channels", "thresholds", "n_boxes", "size_priors", "x_range",
                "y_range", "elev_range_deg"}


def _merge(defaults, user, path=""):
    out = copy.deepcopy(defaults)
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and key not in _LIST_VALUED:
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user=None):
    """Overlay a (possibly partial) config document onto the defaults."""
    return _merge(DEFAULTS, user or {})


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return resolve_config(doc)


def resolve_seed(flag_seed, config_seed):
    """Documented precedence: flag > BEVSIM_SEED env > config > default 42."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("BEVSIM_SEED")
    if env is not None:
        return int(env)
    if config_seed is not None:
        return int(config_seed)
    return 42


def scene_config(cfg):
    data = {k: v for k, v in cfg["data"].items()
            if k not in ("seed", "n_scenes", "n_val_scenes")}
    return SceneConfig.from_json(data)


def arch_from_config(cfg, kind):
    m = cfg["model"]
    d = cfg["data"]
    return {
        "kind": kind,
        "num_classes": d["num_classes"],
        "c_img": d["num_classes"] + 1,
        "image_h": d["h_img"],
        "image_w": d["w_img"],
        "enc_channels": list(m["enc_channels"]),
        "hidden": m["hidden"],
        "c_bev": m["c_bev"],
        "c_fuse": m["c_fuse"],
        "extent": m["extent"],
        "grid_cells": m["grid_cells"],
        "d_min": m["d_min"],
        "d_max": m["d_max"],
        "n_bins": m["n_bins"],
        "gcm": dict(m["gcm"]),
        "share_depth_heads": m["share_depth_heads"],
    }


def distill_config(cfg, seed):
    d = cfg["distill"]
    t = cfg["train"]
    return DistillConfig(
        imd=d["imd"], cmd=d["cmd"], mmdf=d["mmdf"], mmdp=d["mmdp"],
        gcm=d["gcm"], oam=d["oam"], weights=dict(d["weights"]),
        epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=seed,
        teacher_score_thresh=d["teacher_score_thresh"],
        teacher_topk=d["teacher_topk"], qfl_beta=d["qfl_beta"],
    )


def write_lock(out_dir, cfg, command, backend, **meta):
    lock = copy.deepcopy(cfg)
    lock["meta"]["command"] = command
    lock["meta"]["backend"] = backend
    for key, value in meta.items():
        if key not in DEFAULTS["meta"]:
            raise ConfigError(f"unknown meta key: {key}")
        lock["meta"][key] = str(value)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.lock.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(lock, f, indent=2, sort_keys=True)
    return path
