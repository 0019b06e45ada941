"""
Task-specific Wavelet Expert Extractor
Seven wavelet experts per stage, a top-k expert router, and the 4-stage
trainable feature pyramid at 1/4, 1/8, 1/16 and 1/32 of the image
"""

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from scripts.base_module import BaseModule
from scripts.layers import Conv
from scripts.wavelet_ops import WaveletConv
from utils import functional as F
from utils.tensor import ShapeError, Tensor

NUM_EXPERTS = 7
CHAIN_GROUPS = 4


@dataclass
class ExpertBank:
    """Expert maps E_1..E_7 (None where not computed) plus the router parameters"""
    experts: List[Optional[Tensor]]
    gate_weight: Tensor
    gate_bias: Tensor
    k: int


@dataclass
class RoutingDecision:
    """Per-sample selections, 1-based expert numbers in rank order"""
    selected_indices: np.ndarray
    fused_weights: np.ndarray
    alpha: np.ndarray = field(repr=False, default=None)

    def selected_set(self, sample: int = 0) -> set:
        return set(int(i) for i in self.selected_indices[sample])


@dataclass
class TrainablePyramid:
    features: List[Tensor]
    decisions: List[RoutingDecision]


def top_k_indices(alpha: np.ndarray, k: int) -> np.ndarray:
    """0-based indices of the k largest scores per row; ties go to the lower index"""
    if not 1 <= k <= alpha.shape[-1]:
        raise ValueError(f"top-k: k must be in 1..{alpha.shape[-1]}, got {k}")
    return np.argsort(-alpha, axis=-1, kind="stable")[..., :k]


def renormalize_selected(alpha: Tensor, selected: np.ndarray) -> Tensor:
    """alpha~_u = exp(alpha_u) / sum_{v in T} exp(alpha_v); zero outside T"""
    mask = np.zeros(alpha.shape)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    weights = F.mul(F.exp(alpha), F.constant(mask))
    return F.div(weights, F.sum(weights, axis=-1, keepdims=True))


def expert_usage(decisions: Sequence[RoutingDecision]) -> np.ndarray:
    """[stages, 7] selection frequency of each expert across the batch"""
    usage = np.zeros((len(decisions), NUM_EXPERTS))
    for stage, decision in enumerate(decisions):
        counts = np.bincount(decision.selected_indices.reshape(-1) - 1, minlength=NUM_EXPERTS)
        usage[stage] = counts / max(decision.selected_indices.shape[0], 1)
    return usage


class Downsample(BaseModule):
    """DS(.): two stride-2 3x3 convs with GELU between, 3 -> C channels"""

    def __init__(self, name, seed, channels, frozen=False):
        super().__init__(name, seed, frozen)
        self.conv1 = self.child("conv1", Conv(f"{name}.conv1", seed, 3, channels, 3, stride=2, frozen=frozen))
        self.conv2 = self.child("conv2", Conv(f"{name}.conv2", seed, channels, channels, 3, stride=2, frozen=frozen))

    def forward(self, image: Tensor) -> Tensor:
        _, _, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError("downsample", image.shape, detail="H and W must be divisible by 32")
        return self.conv2(F.gelu(self.conv1(image)))


class WaveletExpert(BaseModule):
    """E_n = C1(Cat[f~_n^1..f~_n^4]) + f_m with the chain f~^k = WC_{2n-1}(f^k + f~^{k-1})"""

    def __init__(self, name, seed, channels, number, frozen=False):
        super().__init__(name, seed, frozen)
        self.kernel_size = 2 * number - 1
        self.wc = self.child("wc", WaveletConv(name, seed, channels // CHAIN_GROUPS, self.kernel_size, frozen))
        self.mix = self.child("mix", Conv(f"{name}.mix", seed, channels, channels, 1, frozen=frozen))

    def forward(self, f_m: Tensor) -> Tensor:
        chained, previous = [], None
        for group in F.split(f_m, 1, CHAIN_GROUPS):
            previous = self.wc(group if previous is None else F.add(group, previous))
            chained.append(previous)
        return F.add(self.mix(F.concat(chained, axis=1)), f_m)


class ExpertStage(BaseModule):
    """Expert bank, top-k router and fusing 1x1 conv for one pyramid level"""

    def __init__(self, name, seed, channels, k=4, use_router=True, frozen=False):
        super().__init__(name, seed, frozen)
        if channels % CHAIN_GROUPS:
            raise ValueError(f"{name}: channels ({channels}) must be divisible by {CHAIN_GROUPS}")
        self.k = k
        self.use_router = use_router
        self.experts = [self.child(f"expert{n}", WaveletExpert(f"{name}.expert{n}", seed, channels, n, frozen))
                        for n in range(1, NUM_EXPERTS + 1)]
        self.gate_weight = self.param("gate.w", (NUM_EXPERTS, channels))
        self.gate_bias = self.param("gate.b", (NUM_EXPERTS,), init="zeros")
        self.fuse = self.child("fuse", Conv(f"{name}.fuse", seed, channels, channels, 1, frozen=frozen))

    def build_experts(self, f_m: Tensor, only: Optional[Iterable[int]] = None) -> ExpertBank:
        """Compute the expert maps; `only` limits work to the given 0-based experts"""
        if f_m.shape[1] % CHAIN_GROUPS:
            raise ShapeError("build_experts", f_m.shape, detail=f"channels must be divisible by {CHAIN_GROUPS}")
        wanted = set(range(NUM_EXPERTS)) if only is None else set(only)
        maps = [expert(f_m) if n in wanted else None for n, expert in enumerate(self.experts)]
        return ExpertBank(maps, self.gate_weight.tensor, self.gate_bias.tensor, self.k)

    def gate(self, f_m: Tensor, bank: Optional[ExpertBank] = None) -> Tensor:
        """alpha = softmax(w_g GAP(f_m) + b_g) over the 7 experts"""
        weight = bank.gate_weight if bank is not None else self.gate_weight.tensor
        bias = bank.gate_bias if bank is not None else self.gate_bias.tensor
        pooled = F.mean(f_m, axis=(2, 3))
        return F.softmax(F.add(F.matmul(pooled, F.transpose(weight, (1, 0))), bias), axis=-1)

    def route_topk(self, f_m: Tensor, bank: ExpertBank, alpha: Optional[Tensor] = None):
        batch = f_m.shape[0]
        if not self.use_router:
            selected = np.tile(np.arange(NUM_EXPERTS), (batch, 1))
            weights = F.constant(np.full((batch, NUM_EXPERTS), 1.0 / NUM_EXPERTS))
            alpha_data = weights.data
        else:
            alpha = self.gate(f_m, bank) if alpha is None else alpha
            selected = top_k_indices(alpha.data, bank.k)
            weights = renormalize_selected(alpha, selected)
            alpha_data = alpha.data

        total = f_m
        for n in sorted(set(selected.reshape(-1).tolist())):
            expert_map = bank.experts[n]
            if expert_map is None:
                raise ValueError(f"route_topk: expert {n + 1} was selected but not computed")
            coeff = F.reshape(F.slice_axis(weights, 1, n, n + 1), (batch, 1, 1, 1))
            total = F.add(total, F.mul(coeff, expert_map))

        fused_weights = np.take_along_axis(weights.data, selected, axis=-1)
        decision = RoutingDecision(selected + 1, fused_weights, alpha_data)
        return decision, self.fuse(total)

    def forward(self, f_m: Tensor):
        if not self.use_router:
            return self.route_topk(f_m, self.build_experts(f_m))
        alpha = self.gate(f_m)
        selected = top_k_indices(alpha.data, self.k)
        bank = self.build_experts(f_m, only=set(selected.reshape(-1).tolist()))
        return self.route_topk(f_m, bank, alpha)


class TWEExtractor(BaseModule):
    """Trainable branch: DS -> expert stage, then three (stride-2 conv -> expert stage) levels"""

    def __init__(self, seed, channels=32, k=4, use_router=True, name="twe", frozen=False):
        super().__init__(name, seed, frozen)
        self.channels = channels
        self.downsample = self.child("downsample", Downsample(f"{name}.stage1.downsample", seed, channels, frozen))
        self.reducers = [None] + [
            self.child(f"reduce{i}", Conv(f"{name}.stage{i}.reduce", seed, channels, channels, 3, stride=2, frozen=frozen))
            for i in range(2, 5)
        ]
        self.stages = [self.child(f"stage{i}", ExpertStage(f"{name}.stage{i}", seed, channels, k, use_router, frozen))
                       for i in range(1, 5)]

    def forward(self, image: Tensor) -> TrainablePyramid:
        features, decisions = [], []
        x = self.downsample(image)
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.reducers[i](x)
            decision, x = stage(x)
            features.append(x)
            decisions.append(decision)
        return TrainablePyramid(features, decisions)
