"""Dataclass <-> JSON helpers for configuration files"""
import hashlib
import json
import typing
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path

from core.errors import ConfigError


def _unwrap_optional(tp):
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def dataclass_from_dict(cls, data: dict):
    """Build a (nested) config dataclass, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects a JSON object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown {cls.__name__} keys: {', '.join(unknown)}")

    kwargs = {}
    for name, value in data.items():
        tp = _unwrap_optional(hints[name])
        if is_dataclass(tp) and value is not None:
            value = dataclass_from_dict(tp, value)
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def to_json_dict(obj) -> dict:
    return json.loads(json.dumps(asdict(obj)))


def config_hash(obj) -> str:
    payload = json.dumps(to_json_dict(obj) if is_dataclass(obj) else obj, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e


def save_json(data: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
