"""Config files, overrides and precedence resolution for :class:`TrainConfig`.

Config files are INI-style. Section names group keys by module and are
otherwise informational; every key must be a ``TrainConfig`` field name::

    [env]
    env_id = point-robot-sparse

    [flow_model]
    M = 100
    K = 20
    flow_hidden = 64, 64

    [training]
    total_timesteps = 20000
    lam = auto

A ``manifest.json`` written by ``cflownets train`` is accepted as well; its
resolved config is loaded verbatim.

Precedence: command-line values > config file > built-in defaults.
"""

from __future__ import annotations

import configparser
import json
import typing
from dataclasses import fields
from pathlib import Path

from .training import ConfigError, TrainConfig

SECTIONS = {
    "env": ["env_id"],
    "flow_model": ["M", "K", "flow_hidden", "sampler", "activation", "precision"],
    "retrieval": ["retrieval_hidden", "retrieval_lr", "retrieval_batch_size", "retrieval_pretrain_epochs",
                  "retrieval_finetune_interval", "retrieval_finetune_epochs"],
}

FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_hints = typing.get_type_hints(TrainConfig)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, raw):
    """Coerce a string (or JSON value) to the type of ``TrainConfig.<key>``."""
    if key not in _hints:
        raise ConfigError(key, "unknown configuration key")
    hint = _hints[key]
    try:
        if key == "lam":
            if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("auto", "none", "")):
                return None
            return float(raw)
        if key == "env_id":
            return None if raw is None else str(raw).strip() or None
        if hint is bool:
            return raw if isinstance(raw, bool) else _parse_bool(str(raw))
        if hint is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"{raw!r} is not an integer")
            return int(raw) if not isinstance(raw, str) else int(raw.strip().replace("_", ""))
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            if isinstance(raw, str):
                parts = [p for p in raw.replace("[", "").replace("]", "").split(",") if p.strip()]
                return tuple(int(p) for p in parts)
            return tuple(int(p) for p in raw)
        return str(raw).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        data = data.get("config", data)
        return {k: parse_value(k, v) for k, v in data.items()}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[key] = parse_value(key, raw)
    return values


def parse_overrides(items) -> dict:
    values = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError("override", f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def resolve_config(config_path=None, overrides: dict | None = None) -> TrainConfig:
    values = {}
    if config_path is not None:
        values.update(read_config_file(config_path))
    values.update(overrides or {})
    return TrainConfig(**values).validate()


def write_config_file(config: TrainConfig, path: str | Path) -> None:
    d = config.to_dict()
    placed = {k for keys in SECTIONS.values() for k in keys}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str

    def fmt(v):
        if v is None:
            return "auto"
        if isinstance(v, (list, tuple)):
            return ", ".join(str(x) for x in v)
        return str(v)

    for section, keys in SECTIONS.items():
        parser[section] = {k: fmt(d[k]) for k in keys}
    parser["training"] = {k: fmt(v) for k, v in d.items() if k not in placed}
    with open(path, "w") as fh:
        parser.write(fh)
