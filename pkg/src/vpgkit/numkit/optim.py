"""AdamW with decoupled weight decay, and a warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWHyper:
    lr_peak: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05


@dataclass
class OptimizerState:
    hyper: AdamWHyper = field(default_factory=AdamWHyper)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float,
               grads: dict[str, np.ndarray] | None = None) -> OptimizerState:
    """One AdamW update. Parameters get fresh arrays; ``state`` is updated in place.

    Gradients default to each parameter's ``.grad``.
    """
    h = state.hyper
    if grads is None:
        grads = {}
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"adamw_step: parameter {name!r} has no gradient")
            grads[name] = p.grad
    missing = [n for n in params if n not in grads]
    if missing:
        raise ValueError(f"adamw_step: missing gradients for {missing}")
    t = state.t + 1
    bc1 = 1.0 - h.beta1 ** t
    bc2 = 1.0 - h.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = h.beta1 * m + (1.0 - h.beta1) * g
        v = h.beta2 * v + (1.0 - h.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        decayed = p.data * (1.0 - lr * h.weight_decay)
        p.data = decayed - lr * (m / bc1) / (np.sqrt(v / bc2) + h.eps)
    state.t = t
    return state


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    lr_peak: float

    def __post_init__(self):
        if self.warmup_steps < 1 or self.total_steps < 1:
            raise ValueError("warmup_steps and total_steps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")
        if not self.lr_peak > 0:
            raise ValueError("lr_peak must be > 0")


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0."""
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step > schedule.total_steps:
        warnings.warn(f"step {step} past total_steps {schedule.total_steps}; lr clamped to 0",
                      stacklevel=2)
        return 0.0
    w = schedule.warmup_steps
    if step <= w:
        return schedule.lr_peak * step / w
    span = schedule.total_steps - w
    frac = (step - w) / span
    return 0.5 * schedule.lr_peak * (1.0 + math.cos(math.pi * frac))
