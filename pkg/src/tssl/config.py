"""Experiment configuration: one JSON document with ``model`` and ``train`` sections."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path
from typing import Optional, Tuple

import jsonschema

from .features import SynthCorpusSpec
from .model import ModelConfig
from .trainer import FREEZE_MODES, METHODS, TrainConfig


class ConfigError(ValueError):
    pass


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}
_ENUMS = {
    "method": list(METHODS),
    "freeze_mode": list(FREEZE_MODES),
    "precision": ["float32", "float64"],
    "finetune_attention": ["inherit", "none", "causal"],
    "loss_norm": ["l1", "l2"],
}


def _section_schema(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if typing.get_origin(tp) is tuple:
            props[f.name] = {"type": "array", "items": {"type": "integer", "minimum": 1}}
        else:
            props[f.name] = {"type": _JSON_TYPES[tp]}
        if f.name in _ENUMS:
            props[f.name]["enum"] = _ENUMS[f.name]
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "tssl experiment config",
        "type": "object",
        "properties": {
            "model": _section_schema(ModelConfig),
            "train": _section_schema(TrainConfig),
        },
        "additionalProperties": False,
    }


def synth_schema() -> dict:
    return {**_section_schema(SynthCorpusSpec), "title": "synthetic corpus spec"}


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None


def _validate(doc: dict, schema: dict, where: str) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(x) for x in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {loc}: {e.message}") from None


def load_config(path=None, train_overrides: Optional[dict] = None,
                model_overrides: Optional[dict] = None) -> Tuple[ModelConfig, TrainConfig]:
    """Read and validate a config file; explicit overrides win over file values."""
    doc = _read_json(path) if path is not None else {}
    _validate(doc, config_schema(), str(path))
    train = {**doc.get("train", {}), **{k: v for k, v in (train_overrides or {}).items() if v is not None}}
    model = {**doc.get("model", {}), **{k: v for k, v in (model_overrides or {}).items() if v is not None}}
    try:
        return ModelConfig(**model), TrainConfig(**train)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_synth_spec(path) -> SynthCorpusSpec:
    doc = _read_json(path)
    _validate(doc, synth_schema(), str(path))
    try:
        return SynthCorpusSpec(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def resolved(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg)}
