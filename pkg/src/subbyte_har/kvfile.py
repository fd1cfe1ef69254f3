"""Human-readable ``key = value`` config files.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigurationError


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(d: dict) -> str:
    lines = []
    for key, value in d.items():
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def read_kv(path) -> dict:
    return parse_kv(Path(path).read_text())


def write_kv(path, d: dict) -> None:
    Path(path).write_text(format_kv(d))
