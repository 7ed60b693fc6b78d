"""Plain-text ``key = value`` configuration files with optional ``[section]`` headers.

Values are converted according to the target dataclass' type hints. Numeric
tuples are written comma- or space-separated; sequences of tuples separate
groups with ``;``. Unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import types
import typing
from pathlib import Path
from typing import Any, Union


class ConfigError(ValueError):
    pass


def read_config(path: str | Path, default_section: str | None = None) -> dict[str, dict[str, str]]:
    try:
        text = Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, default_section)


def parse_config(text: str, default_section: str | None = None) -> dict[str, dict[str, str]]:
    """Parse config text into ``{section: {key: value}}``.

    Keys before the first header land in ``default_section``; without one they
    are an error.
    """
    first = next((ln.strip() for ln in text.splitlines() if ln.strip() and not ln.strip().startswith(("#", ";"))), "")
    if first and not first.startswith("["):
        if default_section is None:
            raise ConfigError("config has keys outside any [section]")
        text = f"[{default_section}]\n{text}"
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), strict=True, default_section="\x00none"
    )
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def _split_numbers(text: str) -> list[str]:
    return [tok for tok in text.replace(",", " ").split() if tok]


def _convert(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (Union, types.UnionType):
        non_none = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _convert(raw, non_none[0], key)
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw.strip(), 0)
        if hint is float:
            return float(raw.strip())
        if hint is str:
            return raw.strip()
        if origin is tuple:
            if len(args) == 2 and args[1] is Ellipsis:
                inner = args[0]
                if typing.get_origin(inner) is tuple:
                    groups = [g for g in raw.split(";") if g.strip()]
                    return tuple(_convert(g, inner, key) for g in groups)
                return tuple(_convert(t, inner, key) for t in _split_numbers(raw))
            toks = _split_numbers(raw)
            if len(toks) != len(args):
                raise ValueError(f"expected {len(args)} values, got {len(toks)}")
            return tuple(_convert(t, a, key) for t, a in zip(toks, args))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unsupported config type {hint!r} for {key!r}")


def build_dataclass(cls, values: dict[str, str], section: str = "", **overrides):
    """Instantiate ``cls`` from string values, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in names:
            where = f" in [{section}]" if section else ""
            raise ConfigError(f"unknown key {key!r}{where}")
        kwargs[key] = _convert(raw, hints[key], key)
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section or cls.__name__}] config: {exc}") from exc


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(format_value(v) for v in value)
        return ", ".join(format_value(v) for v in value)
    return str(value)


def dump_dataclass(obj, section: str, exclude: tuple[str, ...] = ()) -> str:
    lines = [f"[{section}]"]
    for f in dataclasses.fields(obj):
        if f.init and f.name not in exclude:
            lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(*chunks: bytes | str) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk.encode() if isinstance(chunk, str) else chunk)
    return h.hexdigest()
