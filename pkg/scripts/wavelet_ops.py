"""
Wavelet Operations
Single-level orthonormal 2D Haar analysis/synthesis and the wavelet convolution
(DWT -> per-subband depthwise conv -> IDWT) every wavelet expert is built from
"""

from dataclasses import dataclass
from typing import Dict

import numpy as np

from scripts.base_module import BaseModule
from utils import functional as F
from utils.tensor import ShapeError, Tensor

SUBBANDS = ("ll", "lh", "hl", "hh")

# Rows: ll, lh, hl, hh over the 2x2 block pixels (a, b, c, d) = (top-left, top-right, bottom-left, bottom-right).
# Symmetric and orthonormal, so it is its own inverse.
HAAR = 0.5 * np.array([
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
])


@dataclass
class Subbands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor

    def as_dict(self) -> Dict[str, Tensor]:
        return {"ll": self.ll, "lh": self.lh, "hl": self.hl, "hh": self.hh}


def haar_dwt2(x: Tensor) -> Subbands:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("haar_dwt2", x.shape, detail="H and W must be even; reflect-pad the input first")
    blocks = F.reshape(x, (b, c, h // 2, 2, w // 2, 2))
    blocks = F.transpose(blocks, (0, 1, 2, 4, 3, 5))
    pixels = F.reshape(blocks, (b, c, h // 2, w // 2, 4))
    coeffs = F.matmul(pixels, F.constant(HAAR.T))
    bands = [F.reshape(part, (b, c, h // 2, w // 2)) for part in F.split(coeffs, -1, 4)]
    return Subbands(*bands)


def haar_idwt2(s: Subbands) -> Tensor:
    shapes = {band.shape for band in s.as_dict().values()}
    if len(shapes) != 1:
        raise ShapeError("haar_idwt2", *(band.shape for band in s.as_dict().values()), detail="subband shapes differ")
    b, c, h, w = s.ll.shape
    stacked = F.concat([F.reshape(band, (b, c, h, w, 1)) for band in (s.ll, s.lh, s.hl, s.hh)], axis=-1)
    pixels = F.matmul(stacked, F.constant(HAAR))
    blocks = F.reshape(pixels, (b, c, h, w, 2, 2))
    blocks = F.transpose(blocks, (0, 1, 2, 4, 3, 5))
    return F.reshape(blocks, (b, c, 2 * h, 2 * w))


def wavelet_conv(x: Tensor, weights: Dict[str, Tensor]) -> Tensor:
    """IWT(DC_k(w_c, WT(x))) with one depthwise k x k kernel tensor [C,1,k,k] per subband"""
    k = weights["ll"].shape[-1]
    if k % 2 == 0:
        raise ValueError(f"wavelet_conv: kernel size must be odd (k = 2n-1), got {k}")
    channels = x.shape[1]
    bands = haar_dwt2(x).as_dict()
    filtered = {
        name: F.conv2d(band, weights[name], stride=1, padding=k // 2, padding_mode="zero", groups=channels)
        for name, band in bands.items()
    }
    return haar_idwt2(Subbands(**filtered))


class WaveletConv(BaseModule):
    """Trainable per-subband depthwise kernels for one receptive size; serialised as wc.{ll,lh,hl,hh}"""

    def __init__(self, name: str, seed: int, channels: int, kernel_size: int, frozen: bool = False):
        super().__init__(name, seed, frozen)
        if kernel_size % 2 == 0:
            raise ValueError(f"WaveletConv: kernel size must be odd, got {kernel_size}")
        self.kernel_size = kernel_size
        self.kernels = {band: self.param(f"wc.{band}", (channels, 1, kernel_size, kernel_size))
                        for band in SUBBANDS}

    def forward(self, x: Tensor) -> Tensor:
        return wavelet_conv(x, {band: p.tensor for band, p in self.kernels.items()})
