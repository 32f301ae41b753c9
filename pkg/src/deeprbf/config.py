"""Run configuration: one JSON document, every leaf addressable by a dotted path."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "task": "steering",
    "head": "rbf",
    "backbone": "auto",
    "seed": 0,
    "out_dir": "runs/default",
    "rbf": {"lam": 1.0, "gamma": 0.6, "beta": 1.72, "p": 2.0},
    "steering": {"theta": 30.0, "n_classes": 10},
    "data": {
        "dir": "",
        "n_samples": 6000,
        "per_class": 500,
        "n_classes": 10,
        "train": "",
        "val": "",
        "test": "",
    },
    "train": {"epochs": 150, "batch_size": 64, "lr": 0.001, "optimizer": "adam", "patience": 0},
    "model": {"checkpoint": ""},
    "poison": {
        "target": 0,
        "n_p": 0,
        "patch_h": 4,
        "patch_w": 4,
        "color": [1.0, 0.9, 0.1],
    },
    "detect": {"dataset": "", "calibrate": True, "target_fpr": 0.05},
    "clean": {
        "dataset": "",
        "calibrate_beta": False,
        "beta_quantile": 0.95,
        "ac_clusters": 2,
        "ac_dims": 10,
        "ac_restarts": 10,
        "ac_max_iter": 100,
    },
    "sweep": {
        "fractions": [0.0, 0.02, 0.05, 0.10, 0.15, 0.25, 0.35, 0.50, 0.70],
        "heads": ["rbf", "softmax"],
    },
    "bench": {"repetitions": 100, "batch": 1},
}


def flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def set_path(cfg: dict, path: str, value) -> None:
    node = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(path, "unknown config path")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(path, "unknown config path")
    node[parts[-1]] = value


def merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(path, "unknown config key")
        if isinstance(out[k], dict) and k != "backbone":
            if not isinstance(v, dict):
                raise ConfigError(path, "expected an object")
            out[k] = merge(out[k], v, path + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            cfg = merge(cfg, json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from None
    for key, value in (overrides or {}).items():
        set_path(cfg, key, value)
    validate(cfg)
    return cfg


def _num(cfg, path, cond, msg):
    value = flatten(cfg)[path]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not cond(value):
        raise ConfigError(path, msg)


def validate(cfg: dict) -> None:
    """Raise :class:`ConfigError` naming the first field that breaks an invariant."""
    if cfg["task"] not in ("steering", "signs"):
        raise ConfigError("task", "must be 'steering' or 'signs'")
    if cfg["head"] not in ("rbf", "softmax"):
        raise ConfigError("head", "must be 'rbf' or 'softmax'")
    _num(cfg, "seed", lambda v: isinstance(v, int) and v >= 0, "must be a nonnegative integer")
    _num(cfg, "rbf.lam", lambda v: v > 0, "lambda must be > 0")
    _num(cfg, "rbf.gamma", lambda v: 0 < v < 1, "gamma must lie in (0, 1)")
    _num(cfg, "rbf.beta", lambda v: v > 0, "beta must be > 0")
    _num(cfg, "rbf.p", lambda v: v >= 1, "p must be >= 1")
    _num(cfg, "steering.theta", lambda v: v > 0, "must be > 0")
    _num(cfg, "steering.n_classes", lambda v: isinstance(v, int) and v >= 2, "must be an integer >= 2")
    _num(cfg, "data.n_samples", lambda v: isinstance(v, int) and v >= 3, "must be an integer >= 3")
    _num(cfg, "data.per_class", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    _num(cfg, "data.n_classes", lambda v: isinstance(v, int) and v >= 2, "must be an integer >= 2")
    _num(cfg, "train.epochs", lambda v: isinstance(v, int) and v >= 0, "must be an integer >= 0")
    _num(cfg, "train.batch_size", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    _num(cfg, "train.lr", lambda v: v > 0, "must be > 0")
    _num(cfg, "train.patience", lambda v: isinstance(v, int) and v >= 0, "must be an integer >= 0")
    if cfg["train"]["optimizer"] not in ("adam", "sgd"):
        raise ConfigError("train.optimizer", "must be 'adam' or 'sgd'")
    _num(cfg, "poison.target", lambda v: isinstance(v, int) and v >= 0, "must be an integer >= 0")
    _num(cfg, "poison.n_p", lambda v: isinstance(v, int) and v >= 0, "must be an integer >= 0")
    _num(cfg, "poison.patch_h", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    _num(cfg, "poison.patch_w", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    color = cfg["poison"]["color"]
    if not isinstance(color, list) or not all(isinstance(c, (int, float)) and 0 <= c <= 1 for c in color):
        raise ConfigError("poison.color", "must be a list of channel values in [0, 1]")
    _num(cfg, "detect.target_fpr", lambda v: 0 <= v < 1, "must lie in [0, 1)")
    _num(cfg, "clean.beta_quantile", lambda v: 0 <= v <= 1, "must lie in [0, 1]")
    _num(cfg, "clean.ac_clusters", lambda v: isinstance(v, int) and v >= 2, "must be an integer >= 2")
    _num(cfg, "clean.ac_dims", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    _num(cfg, "bench.repetitions", lambda v: isinstance(v, int) and v >= 10, "must be an integer >= 10")
    _num(cfg, "bench.batch", lambda v: isinstance(v, int) and v >= 1, "must be an integer >= 1")
    fr = cfg["sweep"]["fractions"]
    if not isinstance(fr, list) or not fr or any(not 0 <= f < 1 for f in fr):
        raise ConfigError("sweep.fractions", "must be a nonempty list of values in [0, 1)")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ConfigError("sweep.fractions", "must be strictly increasing")
    if not set(cfg["sweep"]["heads"]) <= {"rbf", "softmax"} or not cfg["sweep"]["heads"]:
        raise ConfigError("sweep.heads", "must list 'rbf' and/or 'softmax'")


def parse_value(text: str, default):
    """Interpret a command-line string using the type of the default value."""
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list) or text.lstrip().startswith(("{", "[")):
        return json.loads(text)
    return text
