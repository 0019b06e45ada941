"""
Frozen Backbone
A seeded random 4-block pre-norm transformer over stride-16 patch tokens.
Most of the parameter mass sits in the wide MLPs.
Stands in for a pretrained foundation model: every parameter is frozen.
"""

from typing import Tuple

import numpy as np

from scripts.base_module import BaseModule
from scripts.layers import Conv, LayerNorm, Linear
from utils import functional as F
from utils.tensor import ShapeError, Tensor

PATCH = 16


class SelfAttention(BaseModule):
    def __init__(self, name, seed, dim, heads, frozen=True):
        super().__init__(name, seed, frozen)
        if dim % heads:
            raise ValueError(f"{name}: dim ({dim}) must be divisible by heads ({heads})")
        self.heads = heads
        self.qkv = self.child("qkv", Linear(f"{name}.qkv", seed, dim, 3 * dim, frozen=frozen))
        self.proj = self.child("proj", Linear(f"{name}.proj", seed, dim, dim, frozen=frozen))

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        head_dim = d // self.heads
        qkv = F.reshape(self.qkv(x), (b, n, 3, self.heads, head_dim))
        q, k, v = (F.transpose(F.reshape(part, (b, n, self.heads, head_dim)), (0, 2, 1, 3))
                   for part in F.split(qkv, 2, 3))
        scores = F.div(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), float(np.sqrt(head_dim)))
        attended = F.matmul(F.softmax(scores, axis=-1), v)
        return self.proj(F.reshape(F.transpose(attended, (0, 2, 1, 3)), (b, n, d)))


class TransformerBlock(BaseModule):
    """x + Attn(LN(x)), then x + MLP(LN(x))"""

    def __init__(self, name, seed, dim, heads=4, mlp_dim=256, frozen=True):
        super().__init__(name, seed, frozen)
        self.norm1 = self.child("norm1", LayerNorm(f"{name}.norm1", seed, dim, frozen))
        self.attn = self.child("attn", SelfAttention(f"{name}.attn", seed, dim, heads, frozen))
        self.norm2 = self.child("norm2", LayerNorm(f"{name}.norm2", seed, dim, frozen))
        self.fc1 = self.child("fc1", Linear(f"{name}.mlp.fc1", seed, dim, mlp_dim, frozen=frozen))
        self.fc2 = self.child("fc2", Linear(f"{name}.mlp.fc2", seed, mlp_dim, dim, frozen=frozen))

    def forward(self, x: Tensor) -> Tensor:
        x = F.add(x, self.attn(self.norm1(x)))
        return F.add(x, self.fc2(F.gelu(self.fc1(self.norm2(x)))))


class FrozenBackbone(BaseModule):
    def __init__(self, seed, image_size=128, dim=64, heads=4, mlp_dim=2048, depth=4, name="backbone"):
        super().__init__(name, seed, frozen=True)
        if image_size % PATCH:
            raise ValueError(f"image_size ({image_size}) must be divisible by {PATCH}")
        self.image_size = image_size
        self.grid = (image_size // PATCH, image_size // PATCH)
        self.patch_embed = self.child("patch_embed", Conv(f"{name}.patch_embed", seed, 3, dim, PATCH,
                                                          stride=PATCH, padding=0, frozen=True))
        self.pos_embed = self.param("pos_embed", (1, self.grid[0] * self.grid[1], dim))
        self.blocks = [self.child(f"block{i}", TransformerBlock(f"{name}.block{i}", seed, dim, heads, mlp_dim, frozen=True))
                       for i in range(1, depth + 1)]

    @property
    def grid_hw(self) -> Tuple[int, int]:
        return self.grid

    def embed(self, image: Tensor) -> Tensor:
        """F1* = patch tokens + positional embedding, [B, HW/16^2, D]"""
        if tuple(image.shape[2:]) != (self.image_size, self.image_size):
            raise ShapeError("patch_embed", image.shape, detail=f"backbone built for {self.image_size}x{self.image_size}")
        patches = self.patch_embed(image)
        b, d, h, w = patches.shape
        tokens = F.reshape(F.transpose(patches, (0, 2, 3, 1)), (b, h * w, d))
        return F.add(tokens, self.pos_embed.tensor)

    def block(self, index: int, tokens: Tensor) -> Tensor:
        """Frozen block i (1-based)"""
        return self.blocks[index - 1](tokens)

    def forward(self, image: Tensor) -> Tensor:
        tokens = self.embed(image)
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens
