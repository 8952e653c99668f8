"""Flat ``key=value`` run configs and named random substreams."""

from __future__ import annotations

import zlib
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; the same key always gives the same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [_key(n) for n in names]))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(path: str | Path, values: dict[str, Any]) -> None:
    lines = [f"{key}={format_value(values[key])}" for key in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(template: Any, text: str) -> Any:
    """Parse ``text`` into the type of ``template``."""
    if isinstance(template, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def apply_overrides(obj, values: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with matching ``prefix+field`` keys parsed in."""
    assert is_dataclass(obj)
    changes = {}
    for f in fields(obj):
        key = prefix + f.name
        if key in values:
            changes[f.name] = coerce(getattr(obj, f.name), values[key])
    return type(obj)(**{**{f.name: getattr(obj, f.name) for f in fields(obj)}, **changes})


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    return {prefix + f.name: getattr(obj, f.name) for f in fields(obj)}
