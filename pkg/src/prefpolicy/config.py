"""Flat ``key = value`` config files and resolved-config snapshots.

Lines starting with ``#`` are comments. Values are parsed as JSON when
possible (numbers, booleans, lists) and kept as strings otherwise.
"""

from __future__ import annotations

import json
from pathlib import Path

from prefpolicy.errors import ConfigError


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def loads_kv(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def load_kv(path) -> dict:
    try:
        return loads_kv(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None


def dumps_kv(values: dict) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        lines.append(f"{key} = {v if isinstance(v, str) else json.dumps(v)}")
    return "\n".join(lines) + "\n"


def write_snapshot(path, values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_kv(values), encoding="utf-8")
    return path
