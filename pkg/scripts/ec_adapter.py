"""
Expert-guided Conditional Adapter
Multi-scale token assembly, deformable cross-attention injection, the
edge-aware subspace token optimizer (ESTO) and the spatial-aware expert
enhancer (SEE), wired into one adapter stage
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from scripts.base_module import BaseModule
from scripts.layers import Conv, LayerNorm, Linear
from utils import functional as F
from utils.tensor import ShapeError, Tensor

NUM_SCALES = 3

LAPLACIAN = np.array([
    [0.0, 1.0, 0.0],
    [1.0, -4.0, 1.0],
    [0.0, 1.0, 0.0],
])


@dataclass
class TokenBundle:
    """Trainable tokens F~e [B, N_e, C] and the (h, w) of each of the three scales"""
    tokens: Tensor
    scale_layout: List[Tuple[int, int]]

    @property
    def num_tokens(self) -> int:
        return sum(h * w for h, w in self.scale_layout)

    def maps(self, tokens: Optional[Tensor] = None) -> List[Tensor]:
        """Reshape tokens (or another tensor sharing this layout) back to [B, C, h, w] maps"""
        tokens = self.tokens if tokens is None else tokens
        b, _, c = tokens.shape
        pieces = F.split(tokens, 1, [h * w for h, w in self.scale_layout])
        return [F.transpose(F.reshape(piece, (b, h, w, c)), (0, 3, 1, 2))
                for piece, (h, w) in zip(pieces, self.scale_layout)]


def flatten_map(feature: Tensor) -> Tensor:
    b, c, h, w = feature.shape
    return F.reshape(F.transpose(feature, (0, 2, 3, 1)), (b, h * w, c))


def assemble_tokens(f2: Tensor, f3: Tensor, f4: Tensor, previous: Optional[TokenBundle] = None) -> TokenBundle:
    """Cat[RS(F2), RS(F3), RS(F4)] (+ previous bundle from stage 2 on)"""
    for finer, coarser in ((f2, f3), (f3, f4)):
        if finer.shape[:2] != coarser.shape[:2] or finer.shape[2] != 2 * coarser.shape[2] \
                or finer.shape[3] != 2 * coarser.shape[3]:
            raise ShapeError("assemble_tokens", f2.shape, f3.shape, f4.shape,
                             detail="expected maps at 1/8, 1/16, 1/32 with equal channels")
    layout = [(f.shape[2], f.shape[3]) for f in (f2, f3, f4)]
    tokens = F.concat([flatten_map(f) for f in (f2, f3, f4)], axis=1)
    if previous is not None:
        if previous.scale_layout != layout or previous.tokens.shape != tokens.shape:
            raise ShapeError("assemble_tokens", previous.tokens.shape, tokens.shape, detail="previous bundle layout differs")
        tokens = F.add(tokens, previous.tokens)
    return TokenBundle(tokens, layout)


def reference_points(hw: Tuple[int, int]) -> np.ndarray:
    """Normalised (x, y) centre of every token of an h x w grid, row-major, [N, 2]"""
    h, w = hw
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=-1)


def deform_attend(values: List[Tensor], offsets: Tensor, weights: Tensor, frozen_hw: Tuple[int, int]) -> Tensor:
    """
    Weighted sum of bilinear samples. values: per-scale [B,D,h,w] maps;
    offsets: [B,N,3,P,2] in pixels of each scale; weights: [B,N,3,P] summing to 1
    over the last two axes. Returns [B,N,D].
    """
    b, n_f, _, points, _ = offsets.shape
    ref = F.constant(reference_points(frozen_hw).reshape(1, n_f, 1, 2))
    attended = None
    for s, value in enumerate(values):
        h, w = value.shape[2:]
        offset_s = F.reshape(F.slice_axis(offsets, 2, s, s + 1), (b, n_f, points, 2))
        locations = F.add(ref, F.div(offset_s, F.constant([w, h])))
        samples = F.bilinear_sample(value, locations)
        weight_s = F.reshape(F.slice_axis(weights, 2, s, s + 1), (b, n_f, points, 1))
        contribution = F.sum(F.mul(samples, weight_s), axis=2)
        attended = contribution if attended is None else F.add(attended, contribution)
    return attended


class DeformInject(BaseModule):
    """
    Single-head multi-scale deformable cross-attention: frozen tokens query
    P points per trainable scale around their own grid position.
    """

    def __init__(self, name, seed, frozen_dim, channels, points=4, frozen=False):
        super().__init__(name, seed, frozen)
        self.points = points
        self.norm_query = self.child("ln_q", LayerNorm(f"{name}.ln_q", seed, frozen_dim, frozen))
        self.norm_value = self.child("ln_v", LayerNorm(f"{name}.ln_v", seed, channels, frozen))
        self.value = self.child("value", Linear(f"{name}.value", seed, channels, frozen_dim, frozen=frozen))
        self.offsets = self.child("offset", Linear(f"{name}.offset", seed, frozen_dim, NUM_SCALES * points * 2,
                                                   init="zeros", frozen=frozen))
        self.attention = self.child("attn", Linear(f"{name}.attn", seed, frozen_dim, NUM_SCALES * points, frozen=frozen))
        self.output = self.child("out", Linear(f"{name}.out", seed, frozen_dim, frozen_dim, frozen=frozen))

    def forward(self, frozen_tokens: Tensor, bundle: TokenBundle, frozen_hw: Tuple[int, int]) -> Tensor:
        b, n_f, _ = frozen_tokens.shape
        if frozen_hw[0] * frozen_hw[1] != n_f:
            raise ShapeError("deform_inject", frozen_tokens.shape, detail=f"frozen grid {frozen_hw} does not match token count")
        query = self.norm_query(frozen_tokens)
        values = bundle.maps(self.value(self.norm_value(bundle.tokens)))
        offsets = F.reshape(self.offsets(query), (b, n_f, NUM_SCALES, self.points, 2))
        weights = F.reshape(F.softmax(self.attention(query), axis=-1), (b, n_f, NUM_SCALES, self.points))
        return self.output(deform_attend(values, offsets, weights, frozen_hw))


@dataclass
class EstoParams:
    subspaces: int = 4
    temperature: float = 1.0
    edge_weight: float = 1.0
    eps: float = 1e-6
    gate_weight: Optional[Tensor] = None
    gate_bias: Optional[Tensor] = None

    def validate(self, channels: int):
        if self.subspaces < 1 or channels % self.subspaces:
            raise ValueError(f"esto: channels ({channels}) must be divisible by subspaces ({self.subspaces})")
        if self.temperature <= 0:
            raise ValueError(f"esto: temperature must be > 0, got {self.temperature}")
        if self.edge_weight < 0:
            raise ValueError(f"esto: edge weight must be >= 0, got {self.edge_weight}")


def _subspace_view(x: Tensor, subspaces: int) -> Tensor:
    b, n, c = x.shape
    return F.transpose(F.reshape(x, (b, n, subspaces, c // subspaces)), (0, 2, 1, 3))


def edge_mask(f_hat: Tensor, eps: float = 1e-6) -> Tensor:
    """M = sigmoid((V - mean V) / (std V + eps)) with V the per-token channel variance, [B, N]"""
    v = F.var(f_hat, axis=-1)
    v_mean = F.mean(v, axis=1, keepdims=True)
    v_std = F.sqrt(F.add(F.var(v, axis=1, keepdims=True), 1e-12))
    return F.sigmoid(F.div(F.sub(v, v_mean), F.add(v_std, eps)))


def esto(f_hat: Tensor, p: EstoParams, gate_override: Optional[float] = None) -> Tensor:
    """Edge-aware subspace token optimizer on [B, N, C] tokens"""
    b, n, c = f_hat.shape
    if n == 0:
        raise ShapeError("esto", f_hat.shape, detail="no tokens")
    p.validate(c)
    d = c // p.subspaces

    norms = F.sqrt(F.add(F.sum(F.mul(f_hat, f_hat), axis=-1, keepdims=True), 1e-12))
    normed = _subspace_view(F.div(f_hat, norms), p.subspaces)
    raw = _subspace_view(f_hat, p.subspaces)
    scores = F.div(F.matmul(normed, F.transpose(normed, (0, 1, 3, 2))), float(np.sqrt(d) * p.temperature))
    attended = F.matmul(F.softmax(scores, axis=-1), raw)
    tokens = F.reshape(F.transpose(attended, (0, 2, 1, 3)), (b, n, c))

    mask = F.reshape(edge_mask(f_hat, p.eps), (b, n, 1))
    tokens = F.mul(tokens, F.add(F.mul(mask, p.edge_weight), 1.0))

    if gate_override is not None:
        delta = F.constant(gate_override)
    else:
        pooled = F.mean(f_hat, axis=1)
        delta = F.reshape(F.sigmoid(F.add(F.matmul(pooled, p.gate_weight), p.gate_bias)), (b, 1, 1))
    return F.add(F.mul(delta, tokens), f_hat)


class Esto(BaseModule):
    def __init__(self, name, seed, frozen_dim, subspaces=4, temperature=1.0, edge_weight=1.0, frozen=False):
        super().__init__(name, seed, frozen)
        self.gate_weight = self.param("gate.w", (frozen_dim, 1))
        self.gate_bias = self.param("gate.b", (1,), init="zeros")
        self.settings = EstoParams(subspaces, temperature, edge_weight)
        self.settings.validate(frozen_dim)

    def params(self) -> EstoParams:
        s = self.settings
        return EstoParams(s.subspaces, s.temperature, s.edge_weight, s.eps, self.gate_weight.tensor, self.gate_bias.tensor)

    def forward(self, f_hat: Tensor) -> Tensor:
        return esto(f_hat, self.params())


class SpatialEnhancer(BaseModule):
    """SEE: fixed Laplacian, global max and multi-scale depthwise branches, softmax-merged"""

    KERNELS = (3, 5, 7)

    def __init__(self, name, seed, channels, frozen=False):
        super().__init__(name, seed, frozen)
        self.channels = channels
        self.laplacian = np.tile(LAPLACIAN, (channels, 1, 1, 1))
        self.depthwise = [self.child(f"dw{k}", Conv(f"{name}.mso.dw{k}", seed, channels, channels, k,
                                                    groups=channels, frozen=frozen)) for k in self.KERNELS]
        self.pointwise = [self.child(f"pw{k}", Conv(f"{name}.mso.pw{k}", seed, channels, channels, 1, frozen=frozen))
                          for k in self.KERNELS]
        self.merge_logits = self.param("merge.logits", (3,), init="zeros")

    def merge_weights(self) -> np.ndarray:
        """(w_d, w_a, w_m) as plain numbers"""
        logits = self.merge_logits.data.astype(np.float64)
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def laplacian_branch(self, feature: Tensor) -> Tensor:
        return F.conv2d(feature, F.constant(self.laplacian), padding=1, padding_mode="reflect", groups=self.channels)

    def max_branch(self, feature: Tensor) -> Tensor:
        return F.max(feature, axis=(2, 3), keepdims=True)

    def multiscale_branch(self, feature: Tensor) -> Tensor:
        total = None
        for dw, pw in zip(self.depthwise, self.pointwise):
            out = pw(dw(feature))
            total = out if total is None else F.add(total, out)
        return total

    def forward(self, bundle: TokenBundle) -> TokenBundle:
        w_d, w_a, w_m = F.split(F.softmax(self.merge_logits.tensor, axis=0), 0, 3)
        merged = []
        for feature in bundle.maps():
            enhanced = F.add(feature, F.mul(w_d, self.laplacian_branch(feature)))
            enhanced = F.add(enhanced, F.mul(w_a, self.max_branch(feature)))
            enhanced = F.add(enhanced, F.mul(w_m, self.multiscale_branch(feature)))
            merged.append(enhanced)
        return assemble_tokens(*merged, previous=bundle)


class AdapterStage(BaseModule):
    """One EC adapter: inject -> ESTO on the frozen stream, SEE on the trainable stream"""

    def __init__(self, name, seed, frozen_dim, channels, points=4, subspaces=4, temperature=1.0,
                 edge_weight=1.0, use_esto=True, use_see=True, frozen=False):
        super().__init__(name, seed, frozen)
        self.use_esto = use_esto
        self.use_see = use_see
        self.deform = self.child("deform", DeformInject(f"{name}.deform", seed, frozen_dim, channels, points, frozen))
        self.esto = self.child("esto", Esto(f"{name}.esto", seed, frozen_dim, subspaces, temperature, edge_weight, frozen))
        self.see = self.child("see", SpatialEnhancer(f"{name}.see", seed, channels, frozen))

    def forward(self, frozen_tokens: Tensor, bundle: TokenBundle, frozen_hw: Tuple[int, int]):
        injected = self.deform(frozen_tokens, bundle, frozen_hw)
        refined = self.esto(injected) if self.use_esto else injected
        next_bundle = self.see(bundle) if self.use_see else bundle
        return refined, next_bundle
