"""
Gradient check registry
One entry per trainable op family; each case builds a small random instance
for a seed and returns (scalar fn, input) for finite_difference_check.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from scripts.decoder import Decoder
from scripts.ec_adapter import (AdapterStage, DeformInject, EstoParams, SpatialEnhancer, TokenBundle,
                                assemble_tokens, deform_attend, esto, reference_points)
from scripts.losses import bce_with_logits, dice_loss
from scripts.twe_extractor import WaveletExpert, renormalize_selected, top_k_indices
from scripts.wavelet_ops import SUBBANDS, wavelet_conv
from utils import functional as F
from utils.gradcheck import finite_difference_check, projected
from utils.rng import named_rng
from utils.tensor import Tensor, precision

Case = Callable[[int], Tuple[Callable[[Tensor], Tensor], Tensor]]


@dataclass(frozen=True)
class PrecisionSettings:
    tol: float
    eps: float
    floor_scale: float
    stencil: int


# f64 uses the plain |a-b| / max(|a|,|b|,1e-8) error. f32 tape gradients carry
# ~1e-7 relative rounding, so entries below 1% of the largest one are floored.
PRECISION_SETTINGS = {
    "f32": PrecisionSettings(tol=1e-3, eps=1e-4, floor_scale=1e-2, stencil=2),
    "f64": PrecisionSettings(tol=1e-6, eps=1e-3, floor_scale=0.0, stencil=4),
}


@dataclass
class GradcheckCase:
    family: str
    check: str
    build: Case


def _rng(seed: int, tag: str) -> np.random.Generator:
    return named_rng(seed, f"gradcheck/{tag}")


def _random_bundle(rng, batch=1, channels=4, finest=8) -> TokenBundle:
    maps = [Tensor(rng.standard_normal((batch, channels, finest // 2 ** i, finest // 2 ** i))) for i in range(3)]
    return assemble_tokens(*maps)


def _with_tokens(bundle: TokenBundle, tokens: Tensor) -> TokenBundle:
    return TokenBundle(tokens, bundle.scale_layout)


# ---------------------------------------------------------------- cases

def wavelet_input(seed):
    rng = _rng(seed, "wavelet/input")
    weights = {band: Tensor(rng.standard_normal((2, 1, 3, 3))) for band in SUBBANDS}
    return projected(lambda x: wavelet_conv(x, weights), seed), Tensor(rng.standard_normal((1, 2, 8, 8)))


def wavelet_weights(seed):
    rng = _rng(seed, "wavelet/weights")
    x = Tensor(rng.standard_normal((1, 2, 8, 8)))
    others = {band: Tensor(rng.standard_normal((2, 1, 3, 3))) for band in SUBBANDS[1:]}
    return projected(lambda w: wavelet_conv(x, dict(others, ll=w)), seed), Tensor(rng.standard_normal((2, 1, 3, 3)))


def expert_chain(seed):
    expert = WaveletExpert("gc.expert2", seed, 4, 2)
    rng = _rng(seed, "expert/chain")
    return projected(expert, seed), Tensor(rng.standard_normal((1, 4, 4, 4)))


def router_fusion(seed):
    """Fusion f_m + sum alpha~ E over gate logits well separated so the top-k set is stable"""
    rng = _rng(seed, "router/fusion")
    f_m = Tensor(rng.standard_normal((2, 4, 2, 2)))
    experts = Tensor(rng.standard_normal((7, 2, 4, 2, 2)))
    logits = np.stack([rng.permutation(7) * 0.5 + rng.uniform(-0.05, 0.05, 7) for _ in range(2)])

    def fused(x):
        alpha = F.softmax(x, axis=-1)
        weights = renormalize_selected(alpha, top_k_indices(alpha.data, 4))
        total = f_m
        for n in range(7):
            coeff = F.reshape(F.slice_axis(weights, 1, n, n + 1), (2, 1, 1, 1))
            expert = F.reshape(F.slice_axis(experts, 0, n, n + 1), (2, 4, 2, 2))
            total = F.add(total, F.mul(coeff, expert))
        return total

    return projected(fused, seed), Tensor(logits)


def deform_offsets(seed):
    """Offsets chosen so every sample lands at an interior fractional pixel position"""
    rng = _rng(seed, "deform/offsets")
    hw, points = (4, 4), 2
    values = [Tensor(rng.standard_normal((1, 4, s, s))) for s in (8, 4, 2)]
    ref = reference_points(hw)
    offsets = np.zeros((1, 16, 3, points, 2))
    for s, size in enumerate((8, 4, 2)):
        base = ref[:, None, :] * size - 0.5
        target = rng.integers(0, size - 1, size=(16, points, 2)) + rng.uniform(0.25, 0.75, size=(16, points, 2))
        offsets[0, :, s] = target - base
    logits = rng.standard_normal((1, 16, 3 * points))
    weights = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    weights = Tensor(weights.reshape(1, 16, 3, points))
    return projected(lambda x: deform_attend(values, x, weights, hw), seed), Tensor(offsets)


def deform_query(seed):
    rng = _rng(seed, "deform/query")
    module = DeformInject("gc.deform", seed, 8, 4, points=2)
    bundle = _random_bundle(rng)
    return projected(lambda x: module(x, bundle, (4, 4)), seed), Tensor(rng.standard_normal((1, 16, 8)))


def deform_values(seed):
    rng = _rng(seed, "deform/values")
    module = DeformInject("gc.deform", seed, 8, 4, points=2)
    bundle = _random_bundle(rng)
    frozen = Tensor(rng.standard_normal((1, 16, 8)))
    return projected(lambda x: module(frozen, _with_tokens(bundle, x), (4, 4)), seed), bundle.tokens


def _esto_params(rng, channels=8, subspaces=2):
    return EstoParams(subspaces, 1.0, 1.0, 1e-6, Tensor(rng.standard_normal((channels, 1))),
                      Tensor(rng.standard_normal(1)))


def esto_input(seed):
    rng = _rng(seed, "esto/input")
    params = _esto_params(rng)
    return projected(lambda x: esto(x, params), seed), Tensor(rng.standard_normal((2, 4, 8)))


def esto_gate(seed):
    rng = _rng(seed, "esto/gate")
    params = _esto_params(rng)
    x = Tensor(rng.standard_normal((2, 4, 8)))

    def gated(w):
        return esto(x, EstoParams(params.subspaces, params.temperature, params.edge_weight, params.eps, w,
                                  params.gate_bias))

    return projected(gated, seed), params.gate_weight


def see_laplacian(seed):
    rng = _rng(seed, "see/laplacian")
    module = SpatialEnhancer("gc.see", seed, 3)
    return projected(module.laplacian_branch, seed), Tensor(rng.standard_normal((1, 3, 5, 5)))


def see_global_max(seed):
    """Each channel maximum is lifted clear of the runner-up so the stencil never swaps it"""
    rng = _rng(seed, "see/max")
    module = SpatialEnhancer("gc.see", seed, 3)
    x = rng.standard_normal((1, 3, 16))
    x[0, np.arange(3), np.argmax(x[0], axis=1)] += 1.0
    return projected(module.max_branch, seed), Tensor(x.reshape(1, 3, 4, 4))


def see_multiscale(seed):
    rng = _rng(seed, "see/multiscale")
    module = SpatialEnhancer("gc.see", seed, 3)
    return projected(module.multiscale_branch, seed), Tensor(rng.standard_normal((1, 3, 6, 6)))


def see_merge(seed):
    rng = _rng(seed, "see/merge")
    module = SpatialEnhancer("gc.see", seed, 4)
    bundle = _random_bundle(rng)
    logits = module.merge_logits

    def merged(x):
        original, logits.tensor = logits.tensor, x
        try:
            return module(bundle).tokens
        finally:
            logits.tensor = original

    return projected(merged, seed), Tensor(rng.standard_normal(3))


def adapter_stage(seed):
    """One full stage at 32x32 image scale: frozen grid 2x2, trainable maps 4x4 / 2x2 / 1x1, C=8"""
    rng = _rng(seed, "adapter/stage")
    stage = AdapterStage("gc.ec", seed, 8, 8, points=2, subspaces=2)
    bundle = _random_bundle(rng, channels=8, finest=4)

    def both(x):
        refined, next_bundle = stage(x, bundle, (2, 2))
        return F.concat([F.reshape(refined, (-1,)), F.reshape(next_bundle.tokens, (-1,))], axis=0)

    return projected(both, seed), Tensor(rng.standard_normal((1, 4, 8)))


def decoder_input(seed):
    rng = _rng(seed, "decoder/input")
    module = Decoder(seed, 8, 4, width=4, name="gc.decoder")
    maps = [Tensor(rng.standard_normal((1, 4, s, s))) for s in (4, 2, 1)]
    return projected(lambda x: module(x, maps, (8, 8)), seed), Tensor(rng.standard_normal((1, 8, 2, 2)))


def loss_bce(seed):
    rng = _rng(seed, "loss/bce")
    masks = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    return (lambda z: bce_with_logits(z, masks)), Tensor(rng.standard_normal((2, 1, 4, 4)) * 2.0)


def loss_dice(seed):
    rng = _rng(seed, "loss/dice")
    masks = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    return (lambda z: dice_loss(z, masks)), Tensor(rng.standard_normal((2, 1, 4, 4)) * 2.0)


def op_conv_reflect(seed):
    rng = _rng(seed, "ops/conv")
    weight = Tensor(rng.standard_normal((4, 1, 3, 3)))
    return (projected(lambda x: F.conv2d(x, weight, stride=2, padding=1, padding_mode="reflect", groups=2), seed),
            Tensor(rng.standard_normal((1, 2, 6, 6))))


def op_layer_norm(seed):
    rng = _rng(seed, "ops/layer_norm")
    return projected(lambda x: F.layer_norm(x, axis=-1), seed), Tensor(rng.standard_normal((3, 6)))


def op_gelu_softmax(seed):
    rng = _rng(seed, "ops/gelu_softmax")
    return projected(lambda x: F.softmax(F.gelu(x), axis=-1), seed), Tensor(rng.standard_normal((3, 5)))


def op_resize(seed):
    rng = _rng(seed, "ops/resize")
    return projected(lambda x: F.resize(x, (7, 5)), seed), Tensor(rng.standard_normal((1, 2, 3, 4)))


REGISTRY: List[GradcheckCase] = [
    GradcheckCase("wavelet_conv", "input", wavelet_input),
    GradcheckCase("wavelet_conv", "weights", wavelet_weights),
    GradcheckCase("wavelet_expert", "chain", expert_chain),
    GradcheckCase("router_fusion", "gate_logits", router_fusion),
    GradcheckCase("deform_inject", "offsets", deform_offsets),
    GradcheckCase("deform_inject", "frozen_tokens", deform_query),
    GradcheckCase("deform_inject", "trainable_tokens", deform_values),
    GradcheckCase("esto", "input", esto_input),
    GradcheckCase("esto", "gate_weight", esto_gate),
    GradcheckCase("see", "laplacian", see_laplacian),
    GradcheckCase("see", "global_max", see_global_max),
    GradcheckCase("see", "multiscale", see_multiscale),
    GradcheckCase("see", "merge_logits", see_merge),
    GradcheckCase("adapter_stage", "frozen_tokens", adapter_stage),
    GradcheckCase("decoder", "frozen_map", decoder_input),
    GradcheckCase("loss", "bce", loss_bce),
    GradcheckCase("loss", "dice", loss_dice),
    GradcheckCase("ops", "conv2d_reflect_stride2", op_conv_reflect),
    GradcheckCase("ops", "layer_norm", op_layer_norm),
    GradcheckCase("ops", "gelu_softmax", op_gelu_softmax),
    GradcheckCase("ops", "resize", op_resize),
]


def run_gradcheck(mode: str = "f32", seeds: Sequence[int] = range(20),
                  families: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """One row per registered check; worst case over all seeds"""
    if mode not in PRECISION_SETTINGS:
        raise ValueError(f"precision must be one of {sorted(PRECISION_SETTINGS)}, got '{mode}'")
    settings = PRECISION_SETTINGS[mode]
    dtype = np.float64 if mode == "f64" else np.float32
    rows: List[Dict[str, object]] = []
    seeds = list(seeds)
    with precision(dtype):
        for case in REGISTRY:
            if families is not None and case.family not in families:
                continue
            worst_err, worst_index = 0.0, ()
            for seed in seeds:
                fn, x = case.build(seed)
                report = finite_difference_check(fn, x, eps=settings.eps, tol=settings.tol,
                                                 floor_scale=settings.floor_scale, stencil=settings.stencil)
                if report.max_rel_err >= worst_err:
                    worst_err, worst_index = report.max_rel_err, (seed,) + report.worst_index
            rows.append({
                "family": case.family,
                "check": case.check,
                "seeds": len(seeds),
                "max_rel_err": worst_err,
                "worst_index": str(worst_index),
                "pass": bool(worst_err <= settings.tol),
            })
    return pd.DataFrame(rows, columns=["family", "check", "seeds", "max_rel_err", "worst_index", "pass"])
