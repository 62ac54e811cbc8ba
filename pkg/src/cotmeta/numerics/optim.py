"""Plain gradient step, decoupled-weight-decay Adam, and Xavier initialisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from ..rng import Rng
from .tensor import Tensor


def sgd_step(param, grad, lr: float):
    """Return ``param - lr * grad`` as a new value; the inputs are never mutated.

    Works on Tensors (recording the update when grad mode is on, which is how the
    second-order meta-gradient flows through the inner loop) and on plain arrays.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if isinstance(param, Tensor) or isinstance(grad, Tensor):
        if param.shape != grad.shape:
            raise DimensionError(f"param {param.shape} vs grad {grad.shape}")
        return param - grad * lr
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise DimensionError(f"param {param.shape} vs grad {grad.shape}")
    return param - lr * grad


@dataclass(frozen=True)
class AdamWState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamWState":
        shape = np.shape(param)
        return cls(np.zeros(shape), np.zeros(shape), 0, **hyper)

    def to_json(self) -> dict:
        return {
            "first_moment": self.first_moment.tolist(),
            "second_moment": self.second_moment.tolist(),
            "step_count": self.step_count,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AdamWState":
        return cls(
            np.array(d["first_moment"], dtype=np.float64),
            np.array(d["second_moment"], dtype=np.float64),
            int(d["step_count"]),
            float(d["beta1"]),
            float(d["beta2"]),
            float(d["epsilon"]),
            float(d["weight_decay"]),
        )


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState, lr: float) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update with bias-corrected moments. Functional: returns new values."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise DimensionError(
            f"param {param.shape}, grad {grad.shape}, state {state.first_moment.shape} must agree"
        )
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    decayed = param * (1.0 - lr * state.weight_decay)
    new_param = decayed - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_param, replace(state, first_moment=m, second_moment=v, step_count=t)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform(shape: tuple[int, ...], rng: Rng, gain: float = 1.0) -> Tensor:
    """Glorot uniform draw for a ``(fan_in, fan_out)`` matrix."""
    if len(shape) != 2:
        raise ContractError(f"xavier_uniform needs a 2-D shape, got {shape}")
    fan_in, fan_out = shape
    bound = gain * xavier_bound(fan_in, fan_out)
    return Tensor(rng.uniform(-bound, bound, tuple(shape)))
