"""Module pool: every encoder, block and hypernetwork parameter, keyed by identity."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FedMNError, ShapeError
from .modular import ArchitectureSpec, path_count
from .routing import HEAD, HYPER_LAYER, HypernetSpec
from .tensor import Parameter

ENCODER_LAYER = 1


def _init(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    bound = np.sqrt(6.0 / shape[0])
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModulePool:
    spec: ArchitectureSpec
    hyper: HypernetSpec | None
    params: dict = field(default_factory=dict)
    version: int = 0

    @classmethod
    def create(cls, spec: ArchitectureSpec, hyper: HypernetSpec | None = None,
               seed: int = 0, head_scale: float = 0.1,
               head_bias: float = 0.0) -> "ModulePool":
        rng = np.random.default_rng(seed)
        pool = cls(spec, hyper)
        for pid, shape in pool.expected_shapes().items():
            value = _init(rng, shape)
            if pid[0] == HYPER_LAYER and pid[1] == HEAD:
                value = value * head_scale if pid[2] == "w0" else value + head_bias
            pool.params[pid] = Parameter(value, pid)
        return pool

    def expected_shapes(self) -> dict:
        spec = self.spec
        shapes = {}
        if self.hyper is not None:
            for (sub, slot), shape in self.hyper.shapes(
                    spec.input_dim, spec.num_classes, path_count(spec)).items():
                shapes[(HYPER_LAYER, sub, slot)] = shape
        for j in range(spec.width(1)):
            for slot, shape in spec.encoder_shapes().items():
                shapes[(ENCODER_LAYER, j, slot)] = shape
        for l, j in spec.block_keys():
            for slot, shape in spec.block_shapes(l).items():
                shapes[(l, j, slot)] = shape
        return shapes

    def block_params(self, layer: int, block: int) -> list:
        return [p for pid, p in self.params.items() if pid[0] == layer and pid[1] == block]

    def group(self, key: tuple) -> list:
        return self.block_params(*key)

    def parameters(self) -> list:
        return list(self.params.values())

    def encoder_keys(self) -> list:
        return [(ENCODER_LAYER, j) for j in range(self.spec.width(1))]

    def hyper_keys(self) -> list:
        if self.hyper is None:
            return []
        return sorted({pid[:2] for pid in self.params if pid[0] == HYPER_LAYER})

    def group_size(self, key: tuple) -> int:
        return int(sum(p.data.size for p in self.group(key)))

    def state(self, keys=None) -> dict:
        """Copies of parameter values, optionally restricted to block keys."""
        keys = None if keys is None else set(map(tuple, keys))
        return {pid: p.data.copy() for pid, p in self.params.items()
                if keys is None or pid[:2] in keys}

    def load_state(self, state: dict) -> None:
        for pid, value in state.items():
            param = self.params.get(tuple(pid))
            if param is None:
                raise FedMNError(f"unknown parameter {pid}")
            if param.data.shape != np.shape(value):
                raise ShapeError(f"load_state {pid}", param.data.shape, np.shape(value))
            param.data[...] = value

    def copy(self) -> "ModulePool":
        clone = ModulePool(self.spec, self.hyper, version=self.version)
        clone.params = {pid: Parameter(p.data.copy(), pid) for pid, p in self.params.items()}
        return clone

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def save(self, path) -> None:
        """Write an ``.npz`` archive with one array per parameter named ``L{layer}.B{block}.{slot}``."""
        arrays = {f"L{pid[0]}.B{pid[1]}.{pid[2]}": p.data for pid, p in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    def load(self, path) -> None:
        with np.load(Path(path)) as archive:
            state = {}
            for name in archive.files:
                layer, block, slot = name.split(".", 2)
                state[(int(layer[1:]), int(block[1:]), slot)] = archive[name]
        missing = set(self.params) - set(state)
        if missing:
            raise FedMNError(f"checkpoint lacks parameters {sorted(missing)}")
        self.load_state(state)
