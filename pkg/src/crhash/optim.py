"""Adam optimizer with bias-corrected moments, one state per tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.t < 0:
            raise ValueError("step counter must be non-negative")


def adam_init(param: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=np.zeros_like(param, dtype=np.float64),
        v=np.zeros_like(param, dtype=np.float64),
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One update: moment EMAs, bias correction, then the scaled step.

    Mutates ``state`` and ``param`` in place and returns ``param``.
    """
    if grad.shape != param.shape:
        raise ValueError(f"grad shape {grad.shape} does not match param {param.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param
