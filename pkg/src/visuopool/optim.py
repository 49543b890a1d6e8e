"""Adam and a cosine learning-rate schedule with linear warm-up."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tape import ContractError, DimensionError


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ContractError("peak_lr must be positive")
        if self.total_steps <= 0 or not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp from 0 to the peak, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w, total, peak = schedule.warmup_steps, schedule.total_steps, schedule.peak_lr
    if step < w:
        return peak * step / w
    progress = (step - w) / (total - w)
    return max(0.0, peak * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **kwargs) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kwargs)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step. Returns new arrays; ``state`` is advanced in place."""
    if set(params) != set(grads):
        raise DimensionError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    if not state.first_moment:
        state.first_moment = {k: np.zeros_like(v) for k, v in params.items()}
        state.second_moment = {k: np.zeros_like(v) for k, v in params.items()}
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m, v = state.first_moment[name], state.second_moment[name]
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        out[name] = p - (lr / c1) * m / denom
    return out
