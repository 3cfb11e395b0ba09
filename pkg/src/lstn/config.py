"""Flat ``key=value`` (de)serialization for config dataclasses."""
from __future__ import annotations

import dataclasses
import typing
from typing import Any, Mapping

from .errors import ConfigError

# file/CLI spelling -> field name
ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in ALIASES.items()}


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_value(text: str, kind: Any, key: str) -> Any:
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if typing.get_origin(kind) is tuple:
            (inner, *_) = typing.get_args(kind)
            return tuple(parse_value(t, inner, key) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        key = _REVERSE.get(f.name, f.name)
        lines.append(f"{key}={format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_pairs(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def from_mapping(cls, values: Mapping[str, str], base=None, strict: bool = True):
    """Build ``cls`` from string values, starting from ``base`` (or defaults)."""
    types = _field_types(cls)
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for raw_key, raw in values.items():
        key = ALIASES.get(raw_key.replace("-", "_"), raw_key.replace("-", "_"))
        if key not in types:
            if strict:
                raise ConfigError(f"unknown config key {raw_key!r}")
            continue
        kwargs[key] = parse_value(raw, types[key], raw_key) if isinstance(raw, str) else raw
    return cls(**kwargs)


def from_text(cls, text: str, strict: bool = True):
    return from_mapping(cls, parse_pairs(text), strict=strict)


def field_keys(cls) -> list[str]:
    return [_REVERSE.get(f.name, f.name) for f in dataclasses.fields(cls)]
