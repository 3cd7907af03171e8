"""Federated modular networks with per-client learned routing."""
from .config import ExperimentConfig
from .datagen import SynthConfig, generate
from .federation import fedavg_baseline, local_baseline, run_training
from .modular import ArchitectureSpec, DecisionVector, block_count, forward, path_count

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "DecisionVector", "ExperimentConfig", "SynthConfig",
    "block_count", "fedavg_baseline", "forward", "generate", "local_baseline",
    "path_count", "run_training",
]
