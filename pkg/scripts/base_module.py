from abc import ABC, abstractmethod
from typing import Dict, Iterator, Tuple

import numpy as np

from utils.rng import trunc_normal
from utils.tensor import Parameter


class BaseModule(ABC):
    """Parameter registry plus forward contract shared by every component"""

    def __init__(self, name: str, seed: int, frozen: bool = False):
        self.name = name
        self.seed = seed
        self.frozen = frozen
        self._params: Dict[str, Parameter] = {}
        self._children: Dict[str, "BaseModule"] = {}

    def _full(self, local: str) -> str:
        return f"{self.name}.{local}" if self.name else local

    def param(self, local: str, shape, init: str = "normal", value=None) -> Parameter:
        """Create and register a parameter; init is normal (trunc 0.02), zeros or ones"""
        full = self._full(local)
        if value is not None:
            data = np.asarray(value, dtype=np.float64).reshape(shape)
        elif init == "normal":
            data = trunc_normal(self.seed, full, shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init '{init}' for {full}")
        p = Parameter(full, data, frozen=self.frozen)
        self._params[local] = p
        return p

    def child(self, local: str, module: "BaseModule") -> "BaseModule":
        self._children[local] = module
        return module

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for p in self._params.values():
            yield p.name, p
        for module in self._children.values():
            yield from module.named_parameters()

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def freeze(self):
        for _, p in self.named_parameters():
            p.freeze()

    def unfreeze(self):
        for _, p in self.named_parameters():
            p.unfreeze()

    @abstractmethod
    def forward(self, *inputs):
        """Implement the component's computation"""
        pass

    def __call__(self, *inputs, **kwargs):
        return self.forward(*inputs, **kwargs)
