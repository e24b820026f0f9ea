"""Outer-loop optimizer, learning-rate schedule, scaling and clipping."""
from __future__ import annotations

import math
from typing import Collection, Mapping

import numpy as np

from ..numcore import NonFiniteError, ParamSet
from .config import TrainConfig


class Adam:
    """Adaptive-moment updates with bias correction.

    Moments live per parameter name; keys outside ``trainable`` are left
    untouched (and keep no state).
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamSet, grads: ParamSet, lr: float, trainable: Collection[str] | None = None) -> ParamSet:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name, p in params.items():
            if trainable is not None and name not in trainable:
                out[name] = p
                continue
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return ParamSet(out)


def lr_at(t: float, config: TrainConfig) -> float:
    """Schedule as a function of a (possibly fractional) step."""
    beta, warm, total = config.beta, config.warmup_steps, config.total_steps
    if warm > 0 and t < warm:
        return beta * t / warm
    if config.decay == "none" or total <= warm:
        return beta
    progress = (t - warm) / (total - warm)
    return 0.1 * beta + 0.45 * beta * (1.0 + math.cos(math.pi * progress))


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup 0 -> beta, then cosine decay towards 0.1 * beta."""
    if not 0 <= step < config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps})")
    return lr_at(step, config)


def scale_lr(beta_base: float, tasks_per_batch: int, base_batch: int) -> float:
    """Linear learning-rate scaling with the number of tasks per batch."""
    if beta_base <= 0 or tasks_per_batch <= 0 or base_batch <= 0:
        raise ValueError("inputs must be positive")
    return beta_base * tasks_per_batch / base_batch


def clip_gradients(grads: Mapping[str, np.ndarray], clip_norm: float) -> ParamSet:
    """Rescale all gradients jointly if their global L2 norm exceeds ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    names = sorted(grads)
    flat = np.concatenate([np.ravel(grads[k]) for k in names]) if names else np.zeros(0)
    if not np.all(np.isfinite(flat)):
        raise NonFiniteError("gradient has non-finite entries")
    norm = float(np.sqrt(np.dot(flat, flat)))
    if norm <= clip_norm:
        return grads if isinstance(grads, ParamSet) else ParamSet(grads)
    return ParamSet({k: (np.asarray(g, dtype=np.float64) * clip_norm) / norm for k, g in grads.items()})
