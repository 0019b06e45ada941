"""
AdamW with decoupled weight decay
State is created lazily and only for trainable parameters
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from utils.tensor import Parameter


class FrozenParameterError(RuntimeError):
    """A gradient reached a frozen parameter"""

    def __init__(self, name: str):
        super().__init__(f"gradient supplied for frozen parameter '{name}'")
        self.name = name


@dataclass
class OptimState:
    lr: float = 5e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """In-place update of every parameter that has a gradient"""
    for name in grads:
        if name not in params:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if params[name].frozen:
            raise FrozenParameterError(name)

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g

        value = p.data.astype(np.float64) * (1.0 - state.lr * state.weight_decay)
        value -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = value


class AdamW:
    def __init__(self, params: Mapping[str, Parameter], lr: float = 5e-5, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimState(lr, weight_decay, betas[0], betas[1], eps)

    def step(self, grads: Mapping[str, np.ndarray]):
        adamw_step(self.params, grads, self.state)
