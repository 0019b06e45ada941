"""
Config loading
KEY=value files (dotenv syntax) and WEFT_* environment variables mapped onto
dataclass fields, plus the inverse dump used for resolved_config.env
"""

import dataclasses
import os
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from dotenv import dotenv_values

ENV_PREFIX = "WEFT_"
TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def coerce(field: dataclasses.Field, raw: Any) -> Any:
    """Convert a raw string (or value) to the field's declared type"""
    if not isinstance(raw, str):
        return raw
    kind = field.type if isinstance(field.type, type) else {"int": int, "float": float, "bool": bool, "str": str}.get(field.type, str)
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"{field.name.upper()}: {e}")
    return text


def read_config_file(path: str) -> Dict[str, Optional[str]]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def overrides_from(mapping: Mapping[str, Any], cls: Type[T], prefix: str = "") -> Dict[str, Any]:
    """Pick out the entries of mapping that name a field of cls (upper-case keys, optional prefix)"""
    names = {f.name: f for f in dataclasses.fields(cls)}
    picked = {}
    for key, raw in mapping.items():
        if raw is None or not key.startswith(prefix):
            continue
        name = key[len(prefix):].lower()
        if name in names:
            picked[name] = coerce(names[name], raw)
    return picked


def unknown_keys(mapping: Mapping[str, Any], *classes: type) -> list:
    """Keys of a KEY=value mapping that name no field of any of the given dataclasses"""
    names = {f.name.upper() for cls in classes for f in dataclasses.fields(cls)}
    return sorted(k for k in mapping if k.upper() not in names)


def dump_env(config: Any) -> str:
    """Serialise a dataclass as KEY=value lines, one per field, in declaration order"""
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name.upper()}={value}")
    return "\n".join(lines) + "\n"
