"""Key-value configuration files shared by backends, CLI, and service.

Format: UTF-8 text, one ``key = value`` per line, ``#`` comments, dotted keys
for nesting (``backend.kind = toy``). Values are parsed as int, float, bool,
or tuple-of-ints (``4x8x8``) when they look like one, else kept as strings.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Any

__all__ = ["ConfigError", "parse_value", "load_config", "dump_config"]

_DIMS_RE = re.compile(r"^\d+(x\d+)+$")


class ConfigError(ValueError):
    """Malformed configuration file or value."""


def parse_value(raw: str) -> Any:
    text = raw.strip()
    if _DIMS_RE.match(text):
        return tuple(int(p) for p in text.split("x"))
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config(path: str | Path) -> dict[str, Any]:
    """Parse a config file into a flat dict keyed by dotted names."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(raw)
    return out


def dump_config(values: dict[str, Any], path: str | Path) -> None:
    lines = []
    for key, value in values.items():
        if isinstance(value, tuple):
            value = "x".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
