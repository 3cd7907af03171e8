"""Routing hypernetwork and binary-concrete path sampling.

The hypernetwork embeds a whole local dataset: every sample is mapped to
``[phi_x(x), phi_y(y)]``, L2-normalised, sent through a single dense head with
one output per path, and the head outputs are averaged over samples.  A
sigmoid turns the average into per-path probabilities.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .modular import DecisionVector
from .tensor import Tensor

HYPER_LAYER = 0
FEATURE_MAP, LABEL_MAP, HEAD = 0, 1, 2
_NORM_EPS = 1e-12
_PROB_EPS = 1e-12


@dataclass(frozen=True)
class HypernetSpec:
    d_x: int = 32
    d_y: int = 32
    hidden: int = 64

    def __post_init__(self):
        bad = [f"{k} must be >= 1" for k in ("d_x", "d_y", "hidden") if int(getattr(self, k)) < 1]
        if bad:
            raise ConfigError(bad)

    def shapes(self, input_dim: int, num_classes: int, num_paths: int) -> dict:
        """Parameter shapes keyed by ``(sub-network, slot)``."""
        return {
            (FEATURE_MAP, "w0"): (input_dim, self.hidden),
            (FEATURE_MAP, "b0"): (self.hidden,),
            (FEATURE_MAP, "w1"): (self.hidden, self.d_x),
            (FEATURE_MAP, "b1"): (self.d_x,),
            (LABEL_MAP, "w0"): (num_classes, self.d_y),
            (LABEL_MAP, "b0"): (self.d_y,),
            (HEAD, "w0"): (self.d_x + self.d_y, num_paths),
            (HEAD, "b0"): (num_paths,),
        }


@dataclass(frozen=True)
class TemperatureSchedule:
    total_rounds: int
    start: float = 1.0
    end: float = 0.1

    def __post_init__(self):
        problems = []
        if int(self.total_rounds) < 1:
            problems.append("total_rounds must be >= 1")
        if not (self.start > 0 and self.end > 0):
            problems.append("temperatures must be positive")
        if self.end > self.start:
            problems.append("end temperature must not exceed start temperature")
        if problems:
            raise ConfigError(problems)


def temperature(t: int, schedule: TemperatureSchedule) -> float:
    """Exponentially decayed temperature for round ``t`` in ``1..T``."""
    T_ = schedule.total_rounds
    if not 1 <= t <= T_:
        raise ConfigError(f"round {t} outside 1..{T_}")
    if t == T_:
        return float(schedule.end)
    if t == 1:
        return float(schedule.start)
    ratio = schedule.end / schedule.start
    return float(schedule.start * ratio ** ((t - 1) / (T_ - 1)))


def _sub(pool, which):
    return pool.block_params(HYPER_LAYER, which)


def joint_embedding(X, Y_onehot, pool) -> Tensor:
    """Mean over samples of the head applied to the normalised feature/label maps."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y_onehot, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("joint embedding needs a non-empty dataset")
    if Y.shape[0] != X.shape[0]:
        raise DataError(f"feature rows {X.shape[0]} != label rows {Y.shape[0]}")
    w0, b0, w1, b1 = _sub(pool, FEATURE_MAP)
    fx = T.affine(T.relu(T.affine(X, w0, b0)), w1, b1)
    lw, lb = _sub(pool, LABEL_MAP)
    fy = T.affine(Y, lw, lb)
    z = T.concat([fx, fy], axis=1)
    norm = T.sqrt(T.sum(T.square(z), axis=1, keepdims=True) + _NORM_EPS)
    hw, hb = _sub(pool, HEAD)
    return T.mean(T.affine(z / norm, hw, hb), axis=0)


def routing_probs(X, Y_onehot, pool) -> Tensor:
    return T.sigmoid(joint_embedding(X, Y_onehot, pool))


def draw_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform(0, 1) draws, kept strictly inside the open interval."""
    eps = rng.random(size)
    tiny = np.finfo(float).tiny
    return np.clip(eps, tiny, 1.0 - np.finfo(float).epsneg)


def sample_decision(probs, tau: float, noise) -> DecisionVector:
    """Binary-concrete relaxation of Bernoulli(probs) with fixed uniform ``noise``.

    ``noise`` is either an array of Uniform(0,1) draws or a numpy Generator
    from which they are drawn; the draws are stored on the result.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau!r}")
    probs = T.clip(T.tensor(probs), _PROB_EPS, 1.0 - _PROB_EPS)
    if isinstance(noise, np.random.Generator):
        noise = draw_noise(noise, probs.shape[0])
    noise = np.asarray(noise, dtype=float)
    logistic = np.log(noise) - np.log1p(-noise)
    logit_pi = T.log(probs) - T.log(1.0 - probs)
    v = T.sigmoid((logit_pi + logistic) * (1.0 / tau))
    return DecisionVector(v, hard=False, noise=noise)


def harden(V: DecisionVector) -> DecisionVector:
    """Entry -> 1 iff strictly above 0.5."""
    return DecisionVector((V.data > 0.5).astype(float), hard=True)


def bernoulli_entropy(v) -> float:
    """Mean binary entropy (nats) of entries read as probabilities."""
    v = np.clip(np.asarray(v, dtype=float), 1e-300, 1.0)
    q = np.clip(1.0 - np.asarray(v, dtype=float), 1e-300, 1.0)
    return float(np.mean(-(v * np.log(v) + q * np.log(q))))


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)
