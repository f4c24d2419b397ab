"""Flat ``key = value`` run configuration with dotted keys.

Keys live in three groups: ``model.*`` (ModelConfig), ``gst.*`` (GstConfig)
and ``data.*`` (dataset sizes), plus top-level ``seed`` and ``preset``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .selftrain import GstConfig
from .synthdata import PRESETS
from .translator import ModelConfig


class ConfigError(ValueError):
    """Bad key, bad value or inconsistent configuration."""


DATA_DEFAULTS = {"n_source": 200, "n_target": 24}

# seed is shared by every group and set once at top level
_MODEL_KEYS = {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "seed"}
_GST_KEYS = {f.name: f for f in dataclasses.fields(GstConfig) if f.name != "seed"}


def default_values() -> dict[str, object]:
    values: dict[str, object] = {"seed": 0, "preset": "cross_scanner"}
    m, g = ModelConfig(), GstConfig()
    for k in _MODEL_KEYS:
        values[f"model.{k}"] = getattr(m, k)
    for k in _GST_KEYS:
        values[f"gst.{k}"] = getattr(g, k)
    for k, v in DATA_DEFAULTS.items():
        values[f"data.{k}"] = v
    return values


def _parse(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = raw.replace("x", ",").split(",")
            return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=default_values)

    def set(self, key: str, raw) -> None:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        default = self.values[key]
        self.values[key] = _parse(key, raw, default) if isinstance(raw, str) else raw

    def update(self, pairs: list[str]) -> None:
        for item in pairs:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            self.set(k.strip(), v)

    def load(self, path) -> None:
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            self.set(k.strip(), v)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def preset(self) -> str:
        return str(self.values["preset"])

    def model(self) -> ModelConfig:
        kw = {k: self.values[f"model.{k}"] for k in _MODEL_KEYS}
        try:
            return ModelConfig(seed=self.seed, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def gst(self) -> GstConfig:
        kw = {k: self.values[f"gst.{k}"] for k in _GST_KEYS}
        try:
            return GstConfig(seed=self.seed, **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def data(self) -> dict[str, int]:
        return {k: int(self.values[f"data.{k}"]) for k in DATA_DEFAULTS}

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        self.model()
        self.gst()
        if any(v < 1 for v in self.data().values()):
            raise ConfigError("data.n_source and data.n_target must be >= 1")

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())
