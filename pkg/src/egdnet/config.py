"""Plain-text ``key = value`` configuration files mapped onto dataclasses.

Values are parsed according to the type of the field's default:
ints, floats, strings, booleans, comma-separated tuples, and
semicolon-separated tuples of tuples (e.g. backbone stages).
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _parse_scalar(text: str, like: Any, key: str):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def _parse_value(text: str, default: Any, key: str):
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            groups = [g for g in text.split(";") if g.strip()]
            return tuple(tuple(_parse_scalar(v.strip(), default[0][0], key) for v in g.split(",")) for g in groups)
        like = default[0] if default else 0.0
        return tuple(_parse_scalar(v.strip(), like, key) for v in text.split(",") if v.strip())
    return _parse_scalar(text, default, key)


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(", ".join(str(v) for v in g) for g in value)
        return ", ".join(str(v) for v in value)
    return str(value)


def build(cls, values: dict[str, str]):
    """Instantiate dataclass ``cls`` from string values, defaults for the rest."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            kwargs[f.name] = _parse_value(values[f.name], default, f.name)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def dump(obj) -> str:
    return "".join(f"{f.name} = {format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def load_sections(path, *classes):
    """Read ``path`` and split its keys among ``classes``; unknown keys are errors."""
    path = Path(path)
    values = parse_key_values(path.read_text(), str(path))
    known = {f.name: cls for cls in classes for f in dataclasses.fields(cls)}
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys: {', '.join(unknown)}")
    return tuple(build(cls, {k: v for k, v in values.items() if known[k] is cls}) for cls in classes)
