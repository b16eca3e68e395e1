"""Flat key = value config files with # comments."""
from __future__ import annotations

import os


class ConfigError(Exception):
    """Unusable config: missing file, bad syntax, or unknown key."""


def parse_config_file(path: str) -> dict[str, str]:
    """Read a config file into a string map; rejects malformed lines."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {ln}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}: line {ln}: empty key")
            if key in out:
                raise ConfigError(f"{path}: line {ln}: duplicate key '{key}'")
            out[key] = value
    return out


def apply_schema(raw: dict[str, str], schema: dict[str, type], path: str) -> dict:
    """Cast raw string values by schema; unknown keys are hard errors."""
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"{path}: unknown key '{key}' (known: {', '.join(sorted(schema))})")
        caster = schema[key]
        try:
            out[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: field '{key}': {exc}") from exc
    return out
