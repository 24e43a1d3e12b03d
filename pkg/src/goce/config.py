"""Run configuration: one JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .evolution import GateConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InterventionDefaults:
    n_draws: int = 1
    policy: str = "random-uniform"


@dataclass(frozen=True)
class DataConfig:
    hops: int = 2
    group_order: int = 4
    n_entities: int = 16


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    intervention: InterventionDefaults = field(default_factory=InterventionDefaults)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "gate": asdict(self.gate),
            "intervention": asdict(self.intervention),
            "data": asdict(self.data),
            "seed": self.seed,
        }


SECTIONS = {"model": ModelConfig, "gate": GateConfig, "intervention": InterventionDefaults, "data": DataConfig}


def _build(cls, values: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    coerced = {}
    for name, value in values.items():
        default = getattr(cls(), name)
        if isinstance(default, bool) or default is None:
            coerced[name] = value
        elif isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)) and float(value).is_integer():
            coerced[name] = int(value)
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            coerced[name] = float(value)
        elif type(value) is type(default):
            coerced[name] = value
        else:
            raise ConfigError(f"[{section}] {name}: expected {type(default).__name__}, got {value!r}")
    return cls(**coerced)


def from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(obj) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        section = obj.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be an object")
        parts[name] = _build(cls, section, name)
    seed = obj.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an int, got {seed!r}")
    run = RunConfig(seed=seed, **parts)
    run.model = replace(run.model, seed=seed)
    try:
        run.model.validate()
        run.gate.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return run


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(obj: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` (or ``seed=value``) assignments to a raw config dict."""
    obj = json.loads(json.dumps(obj))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = _parse_value(raw)
        if key == "seed":
            obj["seed"] = value
            continue
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.name")
        section, name = key.split(".", 1)
        obj.setdefault(section, {})[name] = value
    return obj


def load(path: str | Path | None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
    obj: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    obj = apply_overrides(obj, overrides)
    if seed is not None:
        obj["seed"] = seed
    return from_dict(obj)
