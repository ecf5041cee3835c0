"""Strict ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored. Values are coerced to the type of
the matching dataclass field; a key the dataclass does not declare is an error.
"""
from __future__ import annotations

import dataclasses
import typing
from importlib import resources
from pathlib import Path

from evamp.errors import ConfigError


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _coerce(value, args[0], key)
    try:
        if tp is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is Path:
            return Path(value)
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(_coerce(v.strip(), inner, key) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {getattr(tp, '__name__', tp)}") from exc
    return value


def build_dataclass(cls, values: dict[str, str], source: str = "<config>", base=None):
    """Instantiate ``cls`` from string values, starting from ``base`` or defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {unknown}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)


def load_dataclass(cls, path, base=None):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_dataclass(cls, parse_kv_text(text, str(path)), str(path), base)


def bundled_preset(name: str) -> str | None:
    """Text of a bundled preset (``presets/<name>.cfg``), or None."""
    res = resources.files("evamp.presets").joinpath(f"{name}.cfg")
    return res.read_text(encoding="utf-8") if res.is_file() else None


def dump_dataclass(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"
