"""Run configuration: flat key = value files with cosmetic sections, plus hashing.

Keys map one-to-one onto TrainConfig fields; unknown keys are rejected so a
typo cannot silently fall back to a default. The config hash is a stable
digest of the canonicalized key/value set and is embedded in every artifact
a command writes.
"""

import configparser
import hashlib
import json
from dataclasses import fields

from .training import TrainConfig

_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ValueError(f"unknown config key {key!r}")
    ftype = _FIELD_TYPES[key]
    type_name = ftype if isinstance(ftype, str) else ftype.__name__
    raw = raw.strip()
    if type_name == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "tuple":
        return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    return raw


def parse_config_file(path) -> dict:
    """Read `key = value` lines (sections allowed, names cosmetic) into typed values."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.lstrip().startswith("["):
        text = "[training]\n" + text
    parser.read_string(text)
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if key in out:
                raise ValueError(f"duplicate config key {key!r}")
            out[key] = _coerce(key, raw)
    return out


def build_train_config(file_values: dict | None = None,
                       overrides: dict | None = None) -> TrainConfig:
    merged = dict(file_values or {})
    for key, raw in (overrides or {}).items():
        merged[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    base = TrainConfig().to_dict()
    unknown = set(merged) - set(base)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    base.update(merged)
    return TrainConfig.from_dict(base)


def config_hash(values: dict) -> str:
    """Deterministic 16-hex digest of a canonicalized key/value mapping."""
    canon = json.dumps(values, sort_keys=True, separators=(",", ":"),
                       default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def render_config(cfg: TrainConfig) -> str:
    lines = ["[training]"]
    for key, val in sorted(cfg.to_dict().items()):
        if isinstance(val, (list, tuple)):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
