"""The two reference experiments: effectiveness on synthetic clusters and communication cost.

``configs/effectiveness.yaml`` and ``configs/communication.yaml`` hold the same
settings for use with ``fedmn run``.
"""
from __future__ import annotations

from .config import ExperimentConfig
from .datagen import SynthConfig

EFFECTIVENESS = dict(
    architecture="2x3x3",
    block_hidden_dim=64,
    rounds=50,
    local_epochs=1,
    learning_rate=0.1,
    hyper_lr_scale=100.0,
    hyper_head_scale=1.0,
)

COMMUNICATION = dict(
    architecture="1x4x3",
    block_hidden_dim=256,
    rounds=20,
    local_epochs=1,
    learning_rate=0.05,
    hyper_lr_scale=100.0,
    hyper_head_scale=1.0,
)


def effectiveness_config(method: str = "fedmn", seed: int = 0) -> ExperimentConfig:
    """Default 3-cluster benchmark; ``seed`` drives both the data and the model."""
    return ExperimentConfig(method=method, seed=seed, synth=SynthConfig(seed=seed),
                            output_dir=f"runs/effectiveness/{method}-s{seed}", **EFFECTIVENESS)


def communication_config(method: str = "fedmn", seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig(method=method, seed=seed, synth=SynthConfig(seed=seed),
                            output_dir=f"runs/communication/{method}-s{seed}", **COMMUNICATION)
