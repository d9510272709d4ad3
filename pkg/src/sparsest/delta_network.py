"""Thresholded temporal deltas with a memorized reference.

Each stream keeps ``x_hat``, the last value that was actually transmitted.
An element fires when it has drifted from ``x_hat`` by strictly more than the
threshold; firing transmits the full drift and resets ``x_hat`` to the
current value, so approximation error never accumulates beyond ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor_core import SparseTensor2D, StructuralError, as_dense, to_sparse


@dataclass(frozen=True, eq=False)
class DeltaState:
    theta: float
    x_hat: np.ndarray

    def __post_init__(self):
        if not self.theta >= 0:
            raise ValueError(f"theta must be >= 0, got {self.theta}")
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "x_hat", as_dense(self.x_hat, "x_hat"))

    @classmethod
    def zeros(cls, dims, theta: float = 0.0) -> "DeltaState":
        return cls(theta, np.zeros(dims))


def fire_mask(x_hat: np.ndarray, x_t: np.ndarray, theta: float) -> np.ndarray:
    return np.abs(x_t - x_hat) > theta


def delta_step_dense(state: DeltaState, x_t) -> tuple[np.ndarray, DeltaState]:
    x_t = as_dense(x_t, "x_t")
    if x_t.shape != state.x_hat.shape:
        raise StructuralError(f"x_t shape {x_t.shape} != x_hat shape {state.x_hat.shape}")
    fired = fire_mask(state.x_hat, x_t, state.theta)
    delta = np.where(fired, x_t - state.x_hat, 0.0)
    x_hat = np.where(fired, x_t, state.x_hat)
    return delta, DeltaState(state.theta, x_hat)


def delta_step(state: DeltaState, x_t) -> tuple[SparseTensor2D, DeltaState]:
    """One thresholded delta step; the delta is returned in canonical sparse form."""
    delta, new_state = delta_step_dense(state, x_t)
    return to_sparse(delta), new_state


def delta_accumulate(conv_of_delta, memory_prev) -> np.ndarray:
    """Delta-memory recursion ``y_t = W * dx_t + y_{t-1}``."""
    a = as_dense(conv_of_delta)
    b = as_dense(memory_prev)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch {a.shape} vs {b.shape}")
    return a + b


def soft_fire_fraction(state: DeltaState, x_t, tau: float = 0.05) -> float:
    """Mean of ``sigmoid((|x_t - x_hat| - theta) / tau)``, a smooth fire fraction."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = np.abs(as_dense(x_t) - state.x_hat)
    return float(np.mean(expit((d - state.theta) / tau)))


def hard_fire_fraction(state: DeltaState, x_t) -> float:
    return float(np.mean(fire_mask(state.x_hat, as_dense(x_t), state.theta)))
