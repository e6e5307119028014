"""Flat key=value config files (one assignment per line, ``#`` comments)."""

from __future__ import annotations

from dataclasses import fields


def parse_kv_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            out[key.strip()] = value.strip()
    return out


def coerce_dataclass_kwargs(cls, items: dict[str, str], *, allow_extra: bool = False) -> dict:
    """Convert string values to the dataclass field types (int/float only)."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            if allow_extra:
                continue
            raise ValueError(f"unknown config key {key!r} for {cls.__name__}")
        ftype = known[key].type
        kwargs[key] = int(raw) if ftype == "int" else float(raw)
    return kwargs
