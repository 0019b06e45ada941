"""
Lightweight convolutional mask decoder
Projects the frozen /16 map and the trainable /8, /16, /32 maps to one width,
fuses them coarse to fine and emits a single-channel logit map at image size
"""

from typing import Optional, Sequence, Tuple

from scripts.base_module import BaseModule
from scripts.layers import Conv
from utils import functional as F
from utils.tensor import ShapeError, Tensor


class Decoder(BaseModule):
    def __init__(self, seed, frozen_dim, channels, width=32, with_pyramid=True, name="decoder", frozen=False):
        super().__init__(name, seed, frozen)
        self.with_pyramid = with_pyramid
        self.proj_frozen = self.child("proj_frozen", Conv(f"{name}.proj_frozen", seed, frozen_dim, width, 1, frozen=frozen))
        self.proj = []
        if with_pyramid:
            self.proj = [self.child(f"proj{s}", Conv(f"{name}.proj{s}", seed, channels, width, 1, frozen=frozen))
                         for s in (8, 16, 32)]
        self.refine1 = self.child("refine1", Conv(f"{name}.refine1", seed, width, width, 3, frozen=frozen))
        self.refine2 = self.child("refine2", Conv(f"{name}.refine2", seed, width, width, 3, frozen=frozen))
        self.head = self.child("head", Conv(f"{name}.head", seed, width, 1, 1, frozen=frozen))

    def forward(self, frozen_map: Tensor, trainable_maps: Optional[Sequence[Tensor]],
                image_hw: Tuple[int, int]) -> Tensor:
        if self.with_pyramid:
            if trainable_maps is None or len(trainable_maps) != 3:
                raise ShapeError("decode", frozen_map.shape, detail="expected trainable maps at 1/8, 1/16 and 1/32")
            f8, f16, f32 = trainable_maps
            if tuple(f16.shape[2:]) != tuple(frozen_map.shape[2:]):
                raise ShapeError("decode", frozen_map.shape, f16.shape, detail="frozen map must sit at 1/16")
            x = self.proj[2](f32)
            x = F.add(F.resize(x, f16.shape[2:]), F.add(self.proj[1](f16), self.proj_frozen(frozen_map)))
            x = F.add(F.resize(x, f8.shape[2:]), self.proj[0](f8))
        else:
            x = self.proj_frozen(frozen_map)
        x = F.gelu(self.refine1(x))
        x = F.gelu(self.refine2(x))
        return F.resize(self.head(x), image_hw, mode="bilinear")
