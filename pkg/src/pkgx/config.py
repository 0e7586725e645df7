"""Run configuration: defaults, TOML file, command-line overrides and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import fields

from .agent import TrainConfig
from .errors import ConfigError
from .reward import CurriculumSchedule

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Keys that only say where things are written; they do not change results
# and are left out of the hash so reruns into another directory match.
_UNHASHED = {("out",), ("rating_cache",), ("jobs",)}


def default_config() -> dict:
    train = {f.name: f.default for f in fields(TrainConfig) if f.name != "curriculum"}
    cur = {f.name: f.default for f in fields(CurriculumSchedule) if f.name != "frozen"}
    return {
        "seed": 0,
        "out": "out",
        "rating_cache": None,
        "jobs": 1,
        "reward": "auto",  # persona when a persona is given, else relevance (non-adaptive)
        "data": {"kg": None, "train": None, "valid": None, "test": None, "persona": None},
        "train": train,
        "curriculum": cur,
        "provider": {"base_url": "stub://", "model_id": None, "embed_model": None, "max_in_flight": 4, "max_retries": 3, "timeout": 60.0},
        "explain": {"m": 3, "beam_width": 64, "rollouts": 64, "mode": "auto"},
    }


def _merge(base: dict, extra: dict, where="") -> dict:
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a table")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def load_run_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the TOML file, then flag overrides (flags win).

    ``overrides`` maps dotted keys ("train.total_steps") to values; ``None``
    values are ignored so unset flags do not clobber the file.
    """
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _merge(cfg, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    kw = dict(cfg["train"])
    kw["seed"] = cfg["seed"]
    kw["curriculum"] = CurriculumSchedule(**cfg["curriculum"])
    try:
        return TrainConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def hashable_view(cfg: dict) -> dict:
    view = copy.deepcopy(cfg)
    for key in _UNHASHED:
        node = view
        for p in key[:-1]:
            node = node[p]
        node.pop(key[-1], None)
    return view


def config_hash(cfg: dict) -> str:
    blob = json.dumps(hashable_view(cfg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
