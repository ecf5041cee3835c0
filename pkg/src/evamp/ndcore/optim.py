from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from evamp.errors import ContractError
from evamp.ndcore.tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_apply(state: AdamState, params: Mapping[str, Tensor],
               grads: Mapping[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is a
    contract error rather than a silent skip.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, p in params.items():
        if grads.get(name) is None:
            raise ContractError(f"no gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_apply(self.state, self.params)

    def zero_grad(self) -> None:
        zero_grad(self.params)
