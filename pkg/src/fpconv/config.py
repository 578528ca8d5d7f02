"""``key = value`` configuration files.

One assignment per line, ``#`` starts a comment, blank lines are ignored.
Values are coerced to the type of the matching dataclass field; tuples are
comma-separated and ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Dict

from fpconv.errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{i}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{i}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_kv(text, str(path))


def _coerce(name: str, raw: str, hint) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if raw.lower() == "none":
            return None
        if "," in raw:
            # a comma-separated value belongs to a sequence member of the union
            inner.sort(key=lambda a: typing.get_origin(a) not in (tuple, list))
        last = None
        for a in inner:
            try:
                return _coerce(name, raw, a)
            except ConfigError as exc:
                last = exc
        raise last
    if origin in (tuple, list):
        item = args[0] if args else str
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_coerce(name, p, item) for p in parts)
    try:
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {hint.__name__}") from None
    return raw


def from_kv(cls, values: Dict[str, str], base=None):
    """Build dataclass ``cls`` from string values; unknown keys are rejected by name."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    kwargs = {} if base is None else {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
    for key, raw in values.items():
        kwargs[key] = _coerce(key, raw, hints[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_kv(obj) -> str:
    lines = [f"{f.name} = {_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"
