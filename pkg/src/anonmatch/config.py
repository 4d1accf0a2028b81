"""Experiment configuration files.

A config is a JSON object whose keys mirror :class:`ExperimentConfig`; the
nested ``env`` and ``hyper`` objects mirror :class:`EnvConfig` and
:class:`HyperParams`.  Missing keys take their defaults, unknown keys are
rejected, and every value is type-checked.  The manifest written next to
results uses the same layout, so it can be fed back as a config.

Overrides use dotted keys, ``env.num_agents=50`` or ``hyper.hidden=[64,64]``;
the value is parsed as JSON and falls back to a bare string.
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .harness import ExperimentConfig
from .learners import HyperParams
from .matchenv import EnvConfig

NESTED = {"env": EnvConfig, "hyper": HyperParams}


class MissingConfigError(ConfigError):
    """Config path does not exist (and names no canned config)."""


def canned_names() -> list[str]:
    root = resources.files("anonmatch") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_path(name_or_path) -> Path:
    """A file path, or the name of a shipped config such as ``dar60``."""
    path = Path(name_or_path)
    if path.is_file():
        return path
    canned = resources.files("anonmatch") / "configs" / f"{name_or_path}.json"
    if canned.is_file():
        return Path(str(canned))
    raise MissingConfigError(f"config file not found: {name_or_path}")


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def check_value(key: str, value, tp):
    """Return ``value`` coerced to ``tp`` (ints widen to floats) or raise."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return check_value(key, value, arg)
            except ConfigError:
                pass
        raise ConfigError(f"{key}: expected {_type_name(tp)}, got {value!r}")
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [check_value(f"{key}[{i}]", v, inner) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key: {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        key = prefix + name
        if cls is ExperimentConfig and name in NESTED:
            kwargs[name] = _build(NESTED[name], value, key + ".")
        else:
            kwargs[name] = check_value(key, value, hints[name])
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    """Typed config from a plain dict; validation of ranges is left to ``validate``."""
    return _build(ExperimentConfig, data)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    """Copy of ``data`` with each ``key=value`` override applied.

    Keys are checked against the schema here so a typo fails even when the
    nested object is absent from the file.
    """
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        cls = ExperimentConfig
        node = data
        for depth, part in enumerate(path):
            names = {f.name for f in dataclasses.fields(cls)}
            dotted = ".".join(path[: depth + 1])
            if part not in names:
                raise ConfigError(f"unknown config key: {dotted}")
            last = depth == len(path) - 1
            if last:
                if cls is ExperimentConfig and part in NESTED:
                    raise ConfigError(f"{dotted}: set individual fields, e.g. {dotted}.<field>=value")
                node[part] = value
            else:
                if cls is not ExperimentConfig or part not in NESTED:
                    raise ConfigError(f"{dotted}: not a nested section")
                node = node.setdefault(part, {})
                cls = NESTED[part]
    return data


def load_config(name_or_path=None, overrides=()) -> tuple[ExperimentConfig, dict]:
    """Load, override, type-check and validate; returns the config and the merged raw dict."""
    data: dict = {}
    if name_or_path is not None:
        path = resolve_path(name_or_path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    data = apply_overrides(data, overrides)
    config = from_dict(data)
    config.validate()
    return config, data


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive)."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"--seeds: cannot parse {text!r}") from None
    if not seeds or min(seeds) < 0:
        raise ConfigError(f"--seeds: need nonnegative seeds, got {text!r}")
    return seeds
