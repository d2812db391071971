"""Adam optimiser with bias correction."""

from __future__ import annotations

import logging
from collections.abc import Mapping, MutableMapping
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment estimates and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> AdamState:
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), t=0)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float = 3e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-3,
) -> np.ndarray:
    """Return the updated parameter and advance *state* by one step."""
    if grad.shape != param.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(
            f"Adam moments {state.m.shape} do not match param shape {param.shape}"
        )
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named parameter dictionary, updated in place."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 3e-4,
        eps: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
    ) -> None:
        self.lr = lr
        self.eps = eps
        self.beta1 = beta1
        self.beta2 = beta2
        self.states = {name: AdamState.zeros_like(p) for name, p in params.items()}

    def step(
        self,
        params: MutableMapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
    ) -> None:
        for name, state in self.states.items():
            params[name] = adam_step(
                params[name],
                grads[name],
                state,
                lr=self.lr,
                beta1=self.beta1,
                beta2=self.beta2,
                eps=self.eps,
            )
