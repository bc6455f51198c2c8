"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass
class AdamWConfig:
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    # None disables the schedule (constant learning rate).
    total_steps: int | None = None


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def warmup_steps(config: AdamWConfig) -> int:
    if config.total_steps is None:
        return 0
    return int(math.floor(config.warmup_fraction * config.total_steps + 0.5))


def lr_at(config: AdamWConfig, step: int) -> float:
    """Learning rate for 1-based ``step``.

    Ramps linearly to ``lr`` over the warmup steps, then decays linearly so
    the last scheduled step still moves (multiplier ``1/(T - W)``).
    """
    T = config.total_steps
    if T is None:
        return config.lr
    W = warmup_steps(config)
    if step <= W:
        return config.lr * step / W
    if T <= W:
        return config.lr
    return config.lr * max(0.0, (T - step + 1) / (T - W))


def adamw_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray, config: AdamWConfig):
    """One update of ``params`` in place. Returns ``(params, state)``."""
    grads = np.asarray(grads)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise InvalidInputError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    state.step += 1
    t = state.step
    lr = lr_at(config, t)
    b1, b2 = config.betas
    if config.weight_decay:
        params *= 1.0 - lr * config.weight_decay
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**t)
    v_hat = state.v / (1.0 - b2**t)
    params -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return params, state
