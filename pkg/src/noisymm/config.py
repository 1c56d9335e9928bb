"""Experiment configuration: one YAML file with ``generator``, ``noise`` and ``train`` sections.

Example::

    schema_version: 1
    label: sym60-corr40
    data_dir: null          # load train.nmm/test.nmm from here instead of generating
    generator: {n_classes: 10, per_class: 200, class_separation: 4.0, seed: 0}
    noise: {label_mode: symmetric, label_rate: 0.6, correspondence_rate: 0.4, seed: 1}
    train: {epochs: 40, warmup_epochs: 5, lr: 0.001, variant: full, seed: 0}

Unknown keys are rejected so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .synthdata import GeneratorConfig, NoiseConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    label: str = "run"
    data_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"]["encoder_hidden"] = list(self.train.encoder_hidden)
        return d

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_seed(self, seed: int, data: bool = False) -> "ExperimentConfig":
        """Override the training seed (and the data seeds when ``data``)."""
        cfg = dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))
        if data:
            cfg = dataclasses.replace(cfg, generator=dataclasses.replace(cfg.generator, seed=seed),
                                      noise=dataclasses.replace(cfg.noise, seed=seed))
        return cfg

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        try:
            self.generator.validate()
            self.noise.validate()
            self.train.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None


def _section(cls, raw, name):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    if "encoder_hidden" in raw:
        raw = {**raw, "encoder_hidden": tuple(raw["encoder_hidden"])}
    try:
        return cls(**raw)
    except TypeError as err:
        raise ConfigError(f"{name}: {err}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    top = {"generator", "noise", "train", "label", "data_dir", "schema_version"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = ExperimentConfig(
        generator=_section(GeneratorConfig, raw.get("generator"), "generator"),
        noise=_section(NoiseConfig, raw.get("noise"), "noise"),
        train=_section(TrainConfig, raw.get("train"), "train"),
        label=str(raw.get("label", "run")),
        data_dir=raw.get("data_dir"),
        schema_version=int(raw.get("schema_version", SCHEMA_VERSION)),
    )
    cfg.validate()
    return cfg


def load(path) -> tuple[ExperimentConfig, str]:
    """Parse a config file; returns the config and the verbatim file text."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from None
    return from_dict(raw), text
