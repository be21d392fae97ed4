"""Flat dotted-key configuration: defaults, JSON files, and ``--key value`` overrides."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .architecture import ModelConfig
from .search import SearchConfig
from .trainer import LR_PRESETS, TrainConfig


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = {
    "lr": 1e-3,
    "lr_preset": "",
    "beta1": 0.9,
    "beta2": 0.999,
    "eps": 1e-8,
    "weight_decay": 0.01,
    "decoupled_weight_decay": True,
    "seq_len": 32,
    "batch_size": 16,
    "epochs": 1,
    "clip_norm": 0.25,
    "train_embeddings": False,
    "max_steps_per_epoch": 0,
}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "",
    "data.train": "",
    "data.valid": "",
    "data.test": "",
    "data.corpus": "",
    "data.bpe": "",
    "tokenizer.num_merges": 960,
    "model.hidden": 64,
    "model.heads": 2,
    "model.blocks": 2,
    "model.max_len": 64,
    "model.ff_mult": 4,
    "model.head_kind": "mos",
    "model.mos_components": 3,
    "model.embed_dropout": 0.1,
    "model.attn_dropout": 0.1,
    "model.resid_dropout": 0.1,
    "model.lstm_dropout": 0.1,
    "model.head_dropout": 0.1,
    **{f"pretrain.{k}": v for k, v in _TRAIN_KEYS.items()},
    **{f"finetune.{k}": v for k, v in _TRAIN_KEYS.items()},
    "search.base": "",
    "search.steps": 10,
    "search.preset": "full",
    "search.weights": "restart",
    "ablate.variants": "only,none,first,last,subset-only,lstm-only",
    "ablate.lstm_layers": 1,
    "ablate.only_lstm_layers": 6,
    "ablate.freeze_base_blocks": True,
    "eval.checkpoint": "",
    "eval.split": "valid",
}
DEFAULTS["pretrain.epochs"] = 3
DEFAULTS["finetune.epochs"] = 2


def coerce(key: str, value: Any) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if not as_float.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(as_float)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    return str(value)


def load_file(path: str | Path) -> dict[str, Any]:
    """Read a flat JSON config; a run manifest (with a ``config`` member) works too."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def resolve(file_values: Mapping[str, Any] | None = None, overrides: Mapping[str, Any] | None = None) -> dict[str, Any]:
    cfg = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            cfg[key] = coerce(key, value)
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    for prefix in ("pretrain", "finetune"):
        preset = cfg[f"{prefix}.lr_preset"]
        if preset and preset not in LR_PRESETS:
            raise ConfigError(f"{prefix}.lr_preset must be one of {sorted(LR_PRESETS)} or empty")
    try:
        model_config(cfg, vocab_size=2)
        train_config(cfg, "pretrain")
        search_config(cfg)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def model_config(cfg: Mapping[str, Any], vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        hidden=cfg["model.hidden"],
        heads=cfg["model.heads"],
        max_len=cfg["model.max_len"],
        ff_mult=cfg["model.ff_mult"],
        embed_dropout=cfg["model.embed_dropout"],
        attn_dropout=cfg["model.attn_dropout"],
        resid_dropout=cfg["model.resid_dropout"],
        lstm_dropout=cfg["model.lstm_dropout"],
        head_dropout=cfg["model.head_dropout"],
    )


def train_config(cfg: Mapping[str, Any], prefix: str) -> TrainConfig:
    values = {k: cfg[f"{prefix}.{k}"] for k in _TRAIN_KEYS if k != "lr_preset"}
    preset = cfg[f"{prefix}.lr_preset"]
    if preset:
        values["lr"] = LR_PRESETS[preset]
    return TrainConfig(seed=cfg["seed"], **values)


def search_config(cfg: Mapping[str, Any]) -> SearchConfig:
    return SearchConfig(
        steps=cfg["search.steps"],
        seed=cfg["seed"],
        train=train_config(cfg, "finetune"),
        preset=cfg["search.preset"],
        weights=cfg["search.weights"],
        head_kind=cfg["model.head_kind"],
        mos_components=cfg["model.mos_components"],
        lstm_layers=cfg["ablate.lstm_layers"],
        only_lstm_layers=cfg["ablate.only_lstm_layers"],
        freeze_base_blocks=cfg["ablate.freeze_base_blocks"],
    )
