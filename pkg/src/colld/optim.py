"""Adam with decoupled weight decay, and the warmup/linear-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .exceptions import ConfigurationError, NumericError, UsageError


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not self.peak_lr > 0:
            raise ConfigurationError(f"peak_lr must be positive, got {self.peak_lr}", key="peak_lr")
        if not 0 < self.warmup_steps <= self.total_steps:
            raise ConfigurationError(
                f"need 0 < warmup_steps <= total_steps, got {self.warmup_steps}/{self.total_steps}",
                key="warmup_steps")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear ramp to the peak over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if step < 0 or step > schedule.total_steps:
        raise UsageError(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if schedule.total_steps == schedule.warmup_steps:
        return 0.0
    return schedule.peak_lr * (schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps)


@dataclass
class OptimizerState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 1e-2
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
              lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update with decoupled weight decay; returns new arrays.

    ``state`` is advanced in place. Parameters keep their dtype; the update is
    computed in that dtype so reloads from float32 checkpoints replay exactly.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else dt(b1) * m + dt(1 - b1) * g
        v = (1 - b2) * g * g if v is None else dt(b2) * v + dt(1 - b2) * g * g
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        state.m[name], state.v[name] = m, v
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        decayed = p * dt(1.0 - lr * state.weight_decay) if state.weight_decay else p
        new[name] = (decayed - dt(lr) * update).astype(p.dtype, copy=False)
    return new


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for name in grads:
            grads[name] = grads[name] * grads[name].dtype.type(factor)
    return total
