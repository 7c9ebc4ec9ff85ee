"""Adam with a step-drop learning-rate schedule, one state per latent."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class DivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.1
    drop_step: int = 50
    drop_factor: float = 10.0
    total_steps: int = 100

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not self.drop_factor > 1:
            raise ValueError("drop_factor must exceed 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.total_steps > 0 and not 0 < self.drop_step <= self.total_steps:
            raise ValueError("drop_step must lie in (0, total_steps]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate for the 0-based iteration ``step``."""
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    if step < schedule.drop_step:
        return schedule.base_lr
    return schedule.base_lr / schedule.drop_factor


def cyclic_lr_at(schedule: LrSchedule, step: int, period: int) -> float:
    """Repeat the step-drop shape every ``period`` iterations.

    The drop sits at the same fraction of each period as ``drop_step`` does
    of ``total_steps``, so ``period == total_steps`` reproduces ``lr_at``.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    drop_at = round(period * schedule.drop_step / schedule.total_steps)
    if step % period < drop_at:
        return schedule.base_lr
    return schedule.base_lr / schedule.drop_factor


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, **kwargs) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), **kwargs)


def adam_step(state: AdamState, z, grad, lr: float) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam descent step; works row-wise on batches too."""
    z = np.asarray(z, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if z.shape != grad.shape or state.m.shape != z.shape:
        raise ValueError(f"shape mismatch: z {z.shape}, grad {grad.shape}, state {state.m.shape}")
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not np.all(np.isfinite(grad)):
        raise DivergedError("diverged")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    z_new = z - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), z_new
