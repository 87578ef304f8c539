"""Versioned YAML run configuration with command-line overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml

from .codec import CodecConfig

SCHEMA_VERSION = 1
_PATH_KEYS = ("checkpoint", "inputs")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "attribute"
    precision: int = 6
    depth: int | None = None
    channels: int = 32
    motion_channels: int = 24
    motion_layers: list | None = None
    lossless_layers: int | None = None
    lam: float = 2537.0
    lams: list = field(default_factory=lambda: [300.0, 910.0, 2537.0, 5960.0, 16000.0])
    k: int = 6
    alpha_init: float = 4.0
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    checkpoint: str | None = None
    inputs: list = field(default_factory=list)
    output: str | None = None
    schema_version: int = SCHEMA_VERSION

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            mode=self.mode, precision=self.precision, depth=self.depth, channels=self.channels,
            motion_channels=self.motion_channels, motion_layers=self.motion_layers,
            lossless_layers=self.lossless_layers, lam=self.lam, k=self.k, alpha_init=self.alpha_init,
        )

    def check_paths(self, keys=_PATH_KEYS) -> None:
        """Every referenced input path must exist before a run starts."""
        for key in keys:
            val = getattr(self, key)
            for p in val if isinstance(val, list) else [val]:
                if p is not None and not os.path.exists(p):
                    raise ConfigError(f"{key}: no such file {p!r}")

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=True)


_TYPES = {f.name: f for f in fields(RunConfig)}


def _coerce(key, value):
    default = getattr(RunConfig(), key)
    if value is None:
        return None
    if key in ("depth", "lossless_layers") or isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
    if key in ("lams", "motion_layers", "inputs"):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        conv = {"lams": float, "motion_layers": int, "inputs": str}[key]
        try:
            return [conv(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: bad list element") from exc
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def build_config(data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate a mapping, apply non-``None`` overrides, and check codec consistency."""
    merged = dict(data or {})
    version = merged.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    unknown = sorted(set(merged) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    if not cfg.lams or any(v <= 0 for v in cfg.lams) or cfg.lam <= 0:
        raise ConfigError("lambda values must be positive")
    try:
        cfg.codec_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc.__class__.__name__})") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(data, overrides)
