"""
Composite segmentation loss: beta * BCE + gamma * Dice on logits
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from utils import functional as F
from utils.tensor import ShapeError, Tensor


@dataclass
class LossConfig:
    beta: float = 5.0
    gamma: float = 2.0
    smooth: float = 1.0

    def validate(self):
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError(f"loss weights must be > 0, got beta={self.beta}, gamma={self.gamma}")
        if self.smooth < 0:
            raise ValueError(f"dice smoothing must be >= 0, got {self.smooth}")
        return self


def check_binary(masks: np.ndarray):
    values = np.unique(masks)
    if not np.all(np.isin(values, (0.0, 1.0))):
        raise ValueError(f"masks must be binary, found values {values[:5].tolist()}")


def bce_with_logits(logits: Tensor, masks: Tensor) -> Tensor:
    """mean(softplus(z) - z*y), the log-sum-exp form of binary cross-entropy"""
    return F.mean(F.sub(F.softplus(logits), F.mul(logits, masks)))


def dice_loss(logits: Tensor, masks: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p*y) + s) / (sum(p) + sum(y) + s) per sample, averaged over the batch"""
    probs = F.sigmoid(logits)
    axes = tuple(range(1, logits.ndim))
    inter = F.sum(F.mul(probs, masks), axis=axes)
    denom = F.add(F.add(F.sum(probs, axis=axes), F.sum(masks, axis=axes)), smooth)
    return F.mean(F.sub(1.0, F.div(F.add(F.mul(inter, 2.0), smooth), denom)))


def loss_terms(logits: Tensor, masks, cfg: LossConfig = LossConfig()) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, bce, dice)"""
    masks = F.as_tensor(masks)
    if logits.shape != masks.shape:
        raise ShapeError("composite_loss", logits.shape, masks.shape)
    check_binary(masks.data)
    bce = bce_with_logits(logits, masks)
    dice = dice_loss(logits, masks, cfg.smooth)
    return F.add(F.mul(bce, cfg.beta), F.mul(dice, cfg.gamma)), bce, dice


def composite_loss(logits: Tensor, masks, cfg: LossConfig = LossConfig()) -> Tensor:
    return loss_terms(logits, masks, cfg)[0]
