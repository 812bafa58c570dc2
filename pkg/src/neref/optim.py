"""Adam with a stepwise learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    pass


@dataclass
class AdamState:
    size: int
    lr: float = 4e-4
    decay: float = 5e-5          # subtracted at every `decay_every` boundary
    decay_every: int = 1000
    lr_floor: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        if self.m.shape != (self.size,) or self.v.shape != (self.size,):
            raise ShapeMismatch("moment vectors must match the parameter count")

    def effective_lr(self, step: int | None = None) -> float:
        """Learning rate in force for iteration ``step`` (0-based, default: the next one)."""
        k = self.step if step is None else step
        return max(self.lr - self.decay * (k // self.decay_every), self.lr_floor)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns new parameters and advances ``state``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != (state.size,) or grads.shape != params.shape:
        raise ShapeMismatch(f"expected ({state.size},) params and grads, got {params.shape} and {grads.shape}")
    lr = state.effective_lr()
    state.step += 1
    t = state.step
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
