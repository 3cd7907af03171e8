"""Experiment configuration: YAML file, CLI overrides, validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .datagen import SynthConfig
from .errors import ConfigError
from .modular import parse_architecture

METHODS = ("fedmn", "fedavg", "local")
AGGREGATIONS = ("renormalized", "literal")


@dataclass
class ExperimentConfig:
    method: str = "fedmn"
    architecture: str = "2x2x2"
    encoder_out_dim: int = 64
    block_hidden_dim: int = 256
    block_out_dim: int = 64
    block_depth: int = 2
    d_x: int = 32
    d_y: int = 32
    hyper_hidden: int = 64
    rounds: int = 150
    local_epochs: int = 1
    learning_rate: float = 0.05
    hyper_lr_scale: float = 1.0
    hyper_head_scale: float = 0.1
    hyper_head_bias: float = 0.0
    batch_size: int = 32
    tau_start: float = 1.0
    tau_end: float = 0.1
    pretrain_rounds: int = 0
    aggregation: str = "renormalized"
    aggregate_hypernet: bool = True
    count_hypernet: bool = False
    manifest: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def problems(self) -> list:
        out = []
        if self.method not in METHODS:
            out.append(f"method must be one of {METHODS}, got {self.method!r}")
        try:
            parse_architecture(self.architecture)
        except ConfigError as exc:
            out.extend(exc.problems)
        for name in ("encoder_out_dim", "block_hidden_dim", "block_out_dim", "d_x", "d_y",
                     "hyper_hidden", "rounds", "local_epochs", "batch_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(f"{name} must be a positive integer, got {value!r}")
        if self.block_depth not in (1, 2):
            out.append(f"block_depth must be 1 or 2, got {self.block_depth!r}")
        if not isinstance(self.learning_rate, (int, float)) or not self.learning_rate > 0:
            out.append(f"learning_rate must be positive, got {self.learning_rate!r}")
        for name in ("hyper_lr_scale", "hyper_head_scale"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
                out.append(f"{name} must be a non-negative number, got {value!r}")
        if not isinstance(self.hyper_head_bias, (int, float)) or isinstance(self.hyper_head_bias, bool):
            out.append(f"hyper_head_bias must be a number, got {self.hyper_head_bias!r}")
        if not (isinstance(self.tau_start, (int, float)) and isinstance(self.tau_end, (int, float))
                and 0 < self.tau_end <= self.tau_start):
            out.append("temperatures must satisfy 0 < tau_end <= tau_start")
        if not isinstance(self.pretrain_rounds, int) or self.pretrain_rounds < 0:
            out.append(f"pretrain_rounds must be a non-negative integer, got {self.pretrain_rounds!r}")
        if self.aggregation not in AGGREGATIONS:
            out.append(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            out.append(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.manifest is None:
            out.extend(f"synth.{p}" for p in self.synth.problems())
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["synth"] = self.synth.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        problems = [f"unknown key {k!r}" for k in unknown]
        synth_raw = raw.pop("synth", None) or {}
        synth_known = {f.name for f in dataclasses.fields(SynthConfig)}
        problems += [f"unknown key 'synth.{k}'" for k in sorted(set(synth_raw) - synth_known)]
        if problems:
            raise ConfigError(problems)
        synth = SynthConfig(**synth_raw)
        return cls(synth=synth, **{k: v for k, v in raw.items() if k in known})

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Apply ``{"key": value}`` or ``{"synth.key": value}`` overrides."""
        raw = self.to_dict()
        for key, value in overrides.items():
            if key.startswith("synth."):
                raw["synth"][key.split(".", 1)[1]] = value
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)


def coerce(text: str):
    """Parse a CLI override value with YAML scalar rules."""
    return yaml.safe_load(text)
