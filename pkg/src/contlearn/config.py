"""JSON experiment configs: schema, loading, dotted-path overrides.

The JSON Schema is derived from the config dataclasses, so the published
schema and the loader cannot drift apart. Value-level invariants (gamma <= 1,
warm_start_k < T, ...) are enforced by the dataclasses themselves.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .harness import DataSource, ExperimentConfig, METHODS, ModelSection, OptimConfig
from .metrics import CBT_ROWS
from .model import ACTIVATIONS, HEAD_KINDS
from .strategies import EWC_ANCHORS, STRATEGY_KINDS, StrategyConfig
from .tasks import ORDERING_POLICIES, SyntheticStreamConfig

ENUMS = {
    "method": METHODS,
    "ordering_policy": ORDERING_POLICIES,
    "cbt_row": CBT_ROWS,
    "model.activation": ACTIVATIONS,
    "stream.head_kind": HEAD_KINDS,
    "strategy.kind": STRATEGY_KINDS,
    "strategy.ewc_anchor": EWC_ANCHORS,
}


def _type_schema(tp, path: str) -> dict:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        inner = _type_schema(args[0], path) if len(args) == 1 else {}
        return {"anyOf": [inner, {"type": "null"}]}
    if origin is tuple:
        return {"type": "array", "items": _type_schema(typing.get_args(tp)[0], path)}
    if dataclasses.is_dataclass(tp):
        return _dataclass_schema(tp, path)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        schema = {"type": "string"}
        if path in ENUMS:
            schema["enum"] = list(ENUMS[path])
        return schema
    raise TypeError(f"no schema mapping for {tp!r} at {path}")


def _dataclass_schema(cls, prefix: str = "") -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        path = f"{prefix}.{f.name}" if prefix else f.name
        props[f.name] = _type_schema(hints[f.name], path)
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    schema = _dataclass_schema(ExperimentConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "contlearn experiment config"
    return schema


def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        tp = hints[f.name]
        sub = [a for a in typing.get_args(tp) if dataclasses.is_dataclass(a)] or (
            [tp] if dataclasses.is_dataclass(tp) else [])
        if sub and value is not None:
            value = _build(sub[0], value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        jsonschema.validate(data, config_schema())
    except jsonschema.ValidationError as e:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config schema violation at {where}: {e.message}") from None
    data = copy.deepcopy(data)
    method = data.get("method")
    if method in STRATEGY_KINDS:
        data.setdefault("strategy", {}).setdefault("kind", method)
    if "data" in data and data["data"] is not None and "stream" not in data:
        data["stream"] = None
    try:
        return _build(ExperimentConfig, data)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def config_to_dict(cfg) -> dict:
    def convert(v):
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        return v
    return convert(dataclasses.asdict(cfg))


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    """Set dotted keys in a config document; keys must exist in the schema."""
    data = copy.deepcopy(data)
    schema = config_schema()
    for text in overrides:
        path, value = parse_override(text)
        node, sub = data, schema
        for i, key in enumerate(path):
            props = sub.get("properties")
            if props is None:
                for alt in sub.get("anyOf", []):
                    props = alt.get("properties") or props
            if not props or key not in props:
                raise ConfigError(f"override {'.'.join(path)!r}: unknown key {key!r}")
            sub = props[key]
            if i == len(path) - 1:
                node[key] = value
            else:
                if not isinstance(node.get(key), dict):
                    node[key] = {}
                node = node[key]
    return data


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(apply_overrides(data, overrides))


__all__ = [
    "DataSource", "ModelSection", "OptimConfig", "StrategyConfig", "SyntheticStreamConfig",
    "apply_overrides", "config_from_dict", "config_schema", "config_to_dict", "load_config",
]
