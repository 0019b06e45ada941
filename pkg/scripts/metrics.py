"""
Evaluation metrics for binary segmentation
Every metric is computed per image and then averaged over the batch
"""

from typing import Dict

import numpy as np

F_BETA_SQ = 0.3
# Report header naming the F-measure convention
F_MEASURE_CONVENTION = "f_measure: beta^2=0.3 at adaptive threshold min(2*mean(p), 1), averaged per image"


def iou_score(pred: np.ndarray, target: np.ndarray) -> float:
    """IoU of two binary maps; two empty maps count as a perfect match"""
    inter = np.sum(pred * target)
    union = np.sum(pred) + np.sum(target) - inter
    return 1.0 if union == 0 else float(inter / union)


def dice_coefficient(pred: np.ndarray, target: np.ndarray) -> float:
    total = np.sum(pred) + np.sum(target)
    return 1.0 if total == 0 else float(2.0 * np.sum(pred * target) / total)


def f_measure(probs: np.ndarray, target: np.ndarray) -> float:
    threshold = min(2.0 * float(np.mean(probs)), 1.0)
    pred = (probs >= threshold) if threshold > 0 else (probs > 0)
    pred = pred.astype(np.float64)
    tp = np.sum(pred * target)
    if np.sum(target) == 0 and np.sum(pred) == 0:
        return 1.0
    precision = tp / np.sum(pred) if np.sum(pred) > 0 else 0.0
    recall = tp / np.sum(target) if np.sum(target) > 0 else 0.0
    if precision + recall == 0:
        return 0.0
    return float((1 + F_BETA_SQ) * precision * recall / (F_BETA_SQ * precision + recall))


def segmentation_metrics(pred_probs: np.ndarray, masks: np.ndarray) -> Dict[str, float]:
    """miou, mdice (binarised at 0.5), mae on probabilities and the adaptive F-measure"""
    probs = np.asarray(pred_probs, dtype=np.float64)
    target = np.asarray(masks, dtype=np.float64)
    if probs.shape != target.shape:
        raise ValueError(f"metrics: shapes differ {probs.shape} vs {target.shape}")
    if probs.ndim < 3:
        probs, target = probs[None], target[None]
    rows = []
    for p, y in zip(probs, target):
        binary = (p >= 0.5).astype(np.float64)
        rows.append((iou_score(binary, y), dice_coefficient(binary, y), float(np.mean(np.abs(p - y))), f_measure(p, y)))
    miou, mdice, mae, fm = np.mean(np.asarray(rows), axis=0)
    return {"miou": float(miou), "mdice": float(mdice), "mae": float(mae), "f_measure": float(fm)}
