"""
Layers
Small parameterised building blocks shared by the extractor, the adapters,
the frozen backbone and the decoder
"""

from scripts.base_module import BaseModule
from utils import functional as F
from utils.tensor import Tensor


class Conv(BaseModule):
    def __init__(self, name, seed, c_in, c_out, kernel_size, stride=1, groups=1, frozen=False, padding_mode="zero",
                 padding=None):
        super().__init__(name, seed, frozen)
        self.stride = stride
        self.groups = groups
        self.padding = kernel_size // 2 if padding is None else padding
        self.padding_mode = padding_mode
        self.weight = self.param("w", (c_out, c_in // groups, kernel_size, kernel_size))
        self.bias = self.param("b", (c_out,), init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight.tensor, self.bias.tensor, stride=self.stride,
                        padding=self.padding, padding_mode=self.padding_mode, groups=self.groups)


class Linear(BaseModule):
    """Weight stored [in, out]; an attached delta module is added to the output"""

    def __init__(self, name, seed, d_in, d_out, init="normal", frozen=False):
        super().__init__(name, seed, frozen)
        self.weight = self.param("w", (d_in, d_out), init=init)
        self.bias = self.param("b", (d_out,), init="zeros")
        self.delta = None

    def forward(self, x: Tensor) -> Tensor:
        out = F.linear(x, self.weight.tensor, self.bias.tensor)
        return out if self.delta is None else F.add(out, self.delta(x))


class LayerNorm(BaseModule):
    def __init__(self, name, seed, dim, frozen=False):
        super().__init__(name, seed, frozen)
        self.gain = self.param("g", (dim,), init="ones")
        self.bias = self.param("b", (dim,), init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return F.add(F.mul(F.layer_norm(x, axis=-1), self.gain.tensor), self.bias.tensor)
