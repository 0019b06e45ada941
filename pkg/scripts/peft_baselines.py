"""
Parameter-efficient baselines on the frozen backbone
LoRA: trainable low-rank deltas on each block's attention projections
VPT: trainable prompt tokens prepended to the token sequence of each block
Neither touches the wavelet branch; both decode the final frozen tokens.
"""

from typing import List

import numpy as np

from scripts.base_module import BaseModule
from scripts.frozen_backbone import FrozenBackbone
from utils import functional as F
from utils.tensor import Tensor


class LowRankDelta(BaseModule):
    """x -> (x A) B; B starts at zero so the wrapped projection is unchanged at step 0"""

    def __init__(self, name, seed, d_in, d_out, rank=4, frozen=False):
        super().__init__(name, seed, frozen)
        self.down = self.param("a", (d_in, rank))
        self.up = self.param("b", (rank, d_out), init="zeros")

    def forward(self, x: Tensor) -> Tensor:
        return F.matmul(F.matmul(x, self.down.tensor), self.up.tensor)


def attach_lora(backbone: FrozenBackbone, seed: int, rank: int, name: str = "lora") -> List[LowRankDelta]:
    """Hang a LowRankDelta on every block's qkv and output projection"""
    deltas = []
    for i, block in enumerate(backbone.blocks, start=1):
        for local, linear in (("qkv", block.attn.qkv), ("proj", block.attn.proj)):
            d_in, d_out = linear.weight.shape
            delta = LowRankDelta(f"{name}.block{i}.{local}", seed, d_in, d_out, rank)
            linear.delta = delta
            deltas.append(delta)
    return deltas


class PromptTokens(BaseModule):
    """Deep visual prompts: a fresh set of learned tokens in front of every block"""

    def __init__(self, name, seed, dim, count=8, depth=4, frozen=False):
        super().__init__(name, seed, frozen)
        self.count = count
        self.prompts = [self.param(f"block{i}.prompts", (1, count, dim)) for i in range(1, depth + 1)]

    def forward(self, backbone: FrozenBackbone, index: int, tokens: Tensor) -> Tensor:
        """Frozen block `index` over [prompts; tokens], prompts dropped from the output"""
        b, n, d = tokens.shape
        prompts = F.add(F.constant(np.zeros((b, self.count, d))), self.prompts[index - 1].tensor)
        out = backbone.block(index, F.concat([prompts, tokens], axis=1))
        return F.slice_axis(out, 1, self.count, self.count + n)
