"""Plain-text ``key = value`` configuration files with typed conversion onto dataclasses.

Blank lines and ``#`` comments are ignored. Tuples are comma separated,
booleans accept true/false/yes/no/1/0, and ``none`` clears optional fields.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .backbone import ConfigError

ALIASES = {"method": "methods", "variant": "variants", "seed": "seeds"}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[ALIASES.get(key, key)] = value
    return out


def parse_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def parse_overrides(items) -> dict[str, str]:
    return parse_text("\n".join(items or []), "--set")


def _convert(value: str, default, hint, key: str):
    text = value.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if text.lower() == "none" and (default is None or type(None) in args):
        return None
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        return _convert(value, default, inner[0], key) if inner else value
    if hint is bool or isinstance(default, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if origin is tuple or hint is tuple or isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        sample = default[0] if isinstance(default, tuple) and default else None
        kind = type(sample) if sample is not None else str
        return tuple(_scalar(p, kind, key) for p in parts)
    if hint in (int, float, str):
        return _scalar(text, hint, key)
    return _scalar(text, type(default) if default is not None else str, key)


def _scalar(text: str, kind, key: str):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def build(cls, values: dict[str, str], ignore: tuple = ()):
    """Instantiate dataclass ``cls`` from string values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key in ignore:
            continue
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(fields))}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else (
            f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
        kwargs[key] = _convert(value, default, hints[key], key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
