"""Run configuration: TOML file < ``AVSEP_*`` environment < command-line flags.

A config file holds optional top-level keys shared by every command
(``seed``, ``out``) and one table per command, e.g.::

    seed = 3

    [train]
    corpus = "data"
    variant = "attention"
    epochs = 8

Unknown tables or keys are rejected, as are ``AVSEP_*`` variables that no
command understands.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .separation import VARIANTS, TrainConfig
from .synthdata import CorpusConfig

ENV_PREFIX = "AVSEP_"

_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _dataclass_schema(cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        kind = kind.split("|")[0].strip()
        out[f.name] = (_TYPES[kind], f.default)
    return out


COMMON = {"seed": (int, 0), "out": (str, None), "force": (bool, False)}

_TRAIN = _dataclass_schema(TrainConfig, skip=("seed",))

SCHEMAS = {
    "gen-data": {**_dataclass_schema(CorpusConfig)},
    "train": {"corpus": (str, None), **_TRAIN},
    "eval": {"corpus": (str, None), "checkpoint": (str, None), "split": (str, "test"),
             "oracle": (str, None), "pairing_seed": (int, 0), "batch_size": (int, 8)},
    "separate": {"checkpoint": (str, None), "mixture": (str, None), "image": (str, None),
                 "category": (int, None)},
    "ablation": {"corpus": (str, None), "variants": (list, list(VARIANTS)),
                 "seeds": (list, [0, 1, 2]), "split": (str, "test"), "pairing_seed": (int, 0),
                 "resume": (bool, False), **{k: v for k, v in _TRAIN.items() if k != "variant"}},
}
for _schema in SCHEMAS.values():
    _schema.update(COMMON)


def _coerce(key: str, kind, value, source: str):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is list:
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            return list(value)
        if kind is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{source}: {key} expects {kind.__name__}, got {value!r}") from None


def read_file(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _from_file(command: str, data: dict, path) -> dict:
    schema = SCHEMAS[command]
    out = {}
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in SCHEMAS:
                raise ConfigError(f"{path}: unknown section [{key}]")
            if key != command:
                continue
            for sub, v in value.items():
                if sub not in schema:
                    raise ConfigError(f"{path}: unknown key {sub!r} in [{key}]")
                out[sub] = _coerce(sub, schema[sub][0], v, str(path))
        elif key in COMMON:
            out[key] = _coerce(key, COMMON[key][0], value, str(path))
        else:
            raise ConfigError(f"{path}: unknown top-level key {key!r}")
    return out


def _from_env(command: str, environ) -> dict:
    schema = SCHEMAS[command]
    every = set().union(*SCHEMAS.values())
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in every:
            raise ConfigError(f"unknown environment setting {name}")
        if key in schema:
            out[key] = _coerce(key, schema[key][0], value, name)
    return out


def resolve(command: str, config_path=None, flags: dict | None = None, environ=None) -> dict:
    """Merged settings for ``command`` with every key of its schema present.

    ``flags`` entries that are ``None`` count as not given.
    """
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    schema = SCHEMAS[command]
    merged = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in schema.items()}
    if config_path is not None:
        merged.update(_from_file(command, read_file(config_path), config_path))
    merged.update(_from_env(command, os.environ if environ is None else environ))
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key not in schema:
            raise ConfigError(f"unknown option {key!r} for {command}")
        merged[key] = _coerce(key, schema[key][0], value, "command line")
    return merged


def train_config(settings: dict, **override) -> TrainConfig:
    """``TrainConfig`` from resolved settings (extra keys ignored)."""
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in {**settings, **override}.items() if k in names})


def corpus_config(settings: dict) -> CorpusConfig:
    names = {f.name for f in fields(CorpusConfig)}
    return CorpusConfig(**{k: v for k, v in settings.items() if k in names})
