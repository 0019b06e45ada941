#!/usr/bin/env python3
"""
Synthetic Segmentation Data
Low-frequency textured backgrounds with 1-5 rotated rectangles, ellipses and
thin bars at widely varying scales. Every sample is a pure function of
(seed, index).
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Tuple

import numpy as np
from scipy import ndimage

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from utils.rng import named_rng
from utils.run_writer import RunWriter
from utils.wten import read_wten

SHAPES = ("rectangle", "ellipse", "bar")
MIN_FRACTION, MAX_FRACTION = 0.01, 0.6
AREA_RANGE = (0.004, 0.35)
MAX_ATTEMPTS = 200


@dataclass
class SampleBatch:
    images: np.ndarray
    masks: np.ndarray
    object_fractions: List[List[float]] = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [B,3,H,W], got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0], 1) + self.images.shape[2:]:
            raise ValueError(f"masks {self.masks.shape} do not match images {self.images.shape}")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("masks must be strictly binary")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "SampleBatch":
        fractions = [self.object_fractions[i] for i in indices] if self.object_fractions else []
        return SampleBatch(self.images[indices], self.masks[indices], fractions)


def octave_noise(rng: np.random.Generator, size: int, octaves=(4, 8, 16)) -> np.ndarray:
    """Sum of upsampled random grids, rescaled to [0, 1]"""
    total = np.zeros((size, size))
    for weight, cells in zip((0.6, 0.3, 0.1), octaves):
        coarse = rng.random((cells, cells))
        total += weight * ndimage.zoom(coarse, size / cells, order=3, mode="reflect")[:size, :size]
    total -= total.min()
    span = total.max()
    return total / span if span > 0 else total


def shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    kind = SHAPES[rng.integers(len(SHAPES))]
    area = np.exp(rng.uniform(np.log(AREA_RANGE[0]), np.log(AREA_RANGE[1]))) * size * size
    aspect = {"rectangle": rng.uniform(1.0, 3.0), "ellipse": rng.uniform(1.0, 2.0), "bar": rng.uniform(6.0, 15.0)}[kind]
    theta = rng.uniform(0.0, np.pi)
    cx, cy = rng.uniform(0.2, 0.8, size=2) * size

    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u = (xs - cx) * np.cos(theta) + (ys - cy) * np.sin(theta)
    v = -(xs - cx) * np.sin(theta) + (ys - cy) * np.cos(theta)
    if kind == "ellipse":
        a, b = np.sqrt(area * aspect / np.pi), np.sqrt(area / (aspect * np.pi))
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    a, b = np.sqrt(area * aspect), np.sqrt(area / aspect)
    return (np.abs(u) <= a / 2) & (np.abs(v) <= b / 2)


def synth_sample(seed: int, index: int, image_size: int) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """One (image [3,H,W], mask [1,H,W], per-object area fractions) triple"""
    rng = named_rng(seed, f"sample{index}")
    for _ in range(MAX_ATTEMPTS):
        objects = [shape_mask(rng, image_size) for _ in range(rng.integers(1, 6))]
        mask = np.any(objects, axis=0)
        if MIN_FRACTION < mask.mean() < MAX_FRACTION:
            break
    else:
        raise RuntimeError(f"sample {index}: no acceptable mask after {MAX_ATTEMPTS} draws")

    background = rng.uniform(0.0, 0.45, size=3)
    foreground = rng.uniform(0.55, 1.0, size=3)
    image = np.empty((3, image_size, image_size))
    for c in range(3):
        texture = octave_noise(rng, image_size)
        image[c] = np.where(mask, foreground[c] * (0.85 + 0.15 * texture), background[c] + 0.35 * texture)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    fractions = [float(obj.mean()) for obj in objects]
    return image, mask[None].astype(np.float32), fractions


def synth_dataset(seed: int, count: int, image_size: int, batch_size: int = None,
                  start: int = 0) -> Iterator[SampleBatch]:
    """Yield samples start..start+count-1 in batches (one batch when batch_size is None)"""
    if count < 1:
        raise ValueError(f"synth_dataset: count must be >= 1, got {count}")
    batch_size = batch_size or count
    for first in range(start, start + count, batch_size):
        last = min(first + batch_size, start + count)
        samples = [synth_sample(seed, i, image_size) for i in range(first, last)]
        yield SampleBatch(np.stack([s[0] for s in samples]), np.stack([s[1] for s in samples]),
                          [s[2] for s in samples])


def make_split(seed: int, count: int, image_size: int, start: int = 0) -> SampleBatch:
    return next(synth_dataset(seed, count, image_size, start=start))


def materialize_dataset(seed: int, count: int, image_size: int, out_dir: str) -> bool:
    """Write dataset.wten (sample{i}.image / sample{i}.mask) plus dataset.json"""
    writer = RunWriter(out_dir)
    batch = make_split(seed, count, image_size)
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        tensors[f"sample{i}.image"] = batch.images[i]
        tensors[f"sample{i}.mask"] = batch.masks[i]
    ok = writer.write_tensors(tensors, "dataset.wten")
    return writer.write_json({"seed": int(seed), "count": int(count), "image_size": int(image_size)},
                             "dataset.json") and ok


def load_dataset(dataset_dir: str) -> SampleBatch:
    tensors = read_wten(os.path.join(dataset_dir, "dataset.wten"))
    count = sum(1 for name in tensors if name.endswith(".image"))
    try:
        images = np.stack([tensors[f"sample{i}.image"] for i in range(count)])
        masks = np.stack([tensors[f"sample{i}.mask"] for i in range(count)])
    except KeyError as e:
        raise ValueError(f"dataset is missing tensor {e}")
    return SampleBatch(images, masks)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Materialise a synthetic segmentation dataset")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--count", type=int, default=16)
    parser.add_argument("--image-size", type=int, default=128)
    parser.add_argument("--out", default="data/synthetic")
    args = parser.parse_args()
    print(f"=== Synthetic dataset: {args.count} samples at {args.image_size}px ===")
    try:
        sys.exit(0 if materialize_dataset(args.seed, args.count, args.image_size, args.out) else 1)
    except (ValueError, OSError) as e:
        print(f"Error in synth: {e}")
        sys.exit(1)
