"""First-order optimizers: plain gradient descent and bias-corrected Adam.

Both are pure: state goes in, new parameters and state come out.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class DescentState:
    step_size: float

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stability: float = 1e-8

    @classmethod
    def zeros(cls, shape, **hyper) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, **hyper)


def _check_shapes(params: np.ndarray, grad: np.ndarray) -> None:
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")


def descent_step(params, grad, state: DescentState) -> np.ndarray:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    _check_shapes(params, grad)
    return params - state.step_size * grad


def adam_direction(grad, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Advance the moments by one step and return the unscaled update m_hat / (sqrt(v_hat) + eps)."""
    grad = np.asarray(grad, dtype=float)
    if state.first_moment.shape != grad.shape:
        raise ValueError(
            f"shape mismatch: state {state.first_moment.shape} vs grad {grad.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    direction = m_hat / (np.sqrt(v_hat) + state.eps_stability)
    return direction, replace(state, first_moment=m, second_moment=v, step_count=t)


def adam_step(params, grad, state: AdamState, step_size: float) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    _check_shapes(params, grad)
    direction, new_state = adam_direction(grad, state)
    return params - step_size * direction, new_state


def adam_step_bound(step_count: int, beta1: float = 0.9, beta2: float = 0.999) -> float:
    """Worst-case |update| / step_size after ``step_count`` steps, for any gradient history.

    Follows from Cauchy-Schwarz on the exponential moving averages; equals 1 on
    the first step and tends to (1 - b1) / sqrt((1 - b2)(1 - b1^2/b2)) as t grows.
    """
    t = int(step_count)
    gamma = beta1**2 / beta2
    geo = (1 - gamma**t) / (1 - gamma)
    return (1 - beta1) / (1 - beta1**t) * np.sqrt((1 - beta2**t) / (1 - beta2) * geo)


class Optimizer:
    """Stateful wrapper choosing between descent and Adam for a fixed parameter shape."""

    def __init__(self, method: str, step_size: float, shape=None):
        if method not in ("gradient-descent", "sgd", "adam"):
            raise ValueError(f"unknown optimizer {method!r}")
        self.method = "adam" if method == "adam" else "gradient-descent"
        self.step_size = float(step_size)
        self.state = AdamState.zeros(shape) if (self.method == "adam" and shape is not None) else None
        if self.method == "gradient-descent":
            self._descent = DescentState(self.step_size)

    def direction(self, grad) -> np.ndarray:
        """Return the update d such that params_new = params - d, advancing state."""
        grad = np.asarray(grad, dtype=float)
        if self.method == "gradient-descent":
            return self.step_size * grad
        if self.state is None:
            self.state = AdamState.zeros(grad.shape)
        d, self.state = adam_direction(grad, self.state)
        return self.step_size * d

    def step(self, params, grad) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        _check_shapes(params, np.asarray(grad))
        return params - self.direction(grad)
