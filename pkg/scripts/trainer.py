"""
Trainer
forward -> composite loss -> backward -> AdamW over the trainable subset,
with periodic held-out evaluation and the run artifacts
"""

import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from scripts.losses import LossConfig, loss_terms
from scripts.metrics import F_MEASURE_CONVENTION, segmentation_metrics
from scripts.model import WeftModel, count_params, save_checkpoint
from scripts.optimizer import AdamW
from scripts.synth_dataset import SampleBatch
from scripts.twe_extractor import expert_usage
from utils.rng import named_rng
from utils.run_writer import RunWriter
from utils.tensor import NumericalFailure, Tape, Tensor, backward
from utils.wten import encode

REPORT_COLUMNS = ["step", "loss", "bce", "dice", "miou", "mdice", "mae", "f_measure"]


@dataclass
class TrainReport:
    rows: List[Dict[str, float]] = field(default_factory=list)
    final_metrics: Dict[str, float] = field(default_factory=dict)
    expert_usage: Optional[np.ndarray] = None
    merge_weight_drift: float = 0.0
    frozen_unchanged: bool = True
    seconds_per_step: float = 0.0
    checkpoint_path: Optional[str] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=REPORT_COLUMNS)

    def loss_at(self, step: int) -> float:
        return next(r["loss"] for r in self.rows if r["step"] == step)


def debug_enabled() -> bool:
    return os.getenv("WEFT_DEBUG", "0").lower() in ("1", "true", "yes")


def predict(model: WeftModel, images: np.ndarray, batch_size: int = 4) -> Tuple[np.ndarray, list]:
    """Sigmoid probabilities for every image (no tape), plus the routing decisions per batch"""
    probs, decisions = [], []
    for first in range(0, images.shape[0], batch_size):
        result = model.run(Tensor(images[first:first + batch_size]))
        probs.append(expit(result.logits.data.astype(np.float64)))
        decisions.append(result.decisions)
    return np.concatenate(probs, axis=0), decisions


def evaluate(model: WeftModel, batch: SampleBatch, batch_size: int = 4) -> Dict[str, float]:
    probs, _ = predict(model, batch.images, batch_size)
    return segmentation_metrics(probs[:, 0], batch.masks[:, 0])


def see_merge_drift(model: WeftModel) -> float:
    """max |w_d + w_a + w_m - 1| over adapter stages"""
    drift = 0.0
    for adapter in model.adapters:
        drift = max(drift, abs(float(adapter.see.merge_weights().sum()) - 1.0))
    return drift


def train_step(model: WeftModel, optimizer: AdamW, images: np.ndarray, masks: np.ndarray,
               loss_cfg: LossConfig) -> Tuple[float, float, float]:
    with Tape(check_finite=debug_enabled()) as tape:
        logits = model(Tensor(images))
        total, bce, dice = loss_terms(logits, masks, loss_cfg)
    if not np.isfinite(total.item()):
        first = tape.first_nonfinite()
        if first is None:
            raise NumericalFailure("loss", len(tape.nodes))
        raise NumericalFailure(first[1], first[0])
    grads = backward(tape, total, optimizer.params)
    optimizer.step(grads)
    return total.item(), bce.item(), dice.item()


def train(model: WeftModel, dataset: SampleBatch, steps: int, schedule, loss_cfg: LossConfig = LossConfig(),
          heldout: Optional[SampleBatch] = None, writer: Optional[RunWriter] = None,
          verbose: bool = True) -> TrainReport:
    if steps < 1:
        raise ValueError(f"train: steps must be >= 1, got {steps}")
    params = model.parameters()
    optimizer = AdamW({n: p for n, p in params.items() if not p.frozen}, lr=schedule.lr,
                      weight_decay=schedule.weight_decay)
    frozen_before = encode(model.state(frozen=True))
    if writer is not None:
        writer.write_tensors(model.state(frozen=True), "frozen_init.wten")

    heldout = heldout if heldout is not None else dataset
    rng = named_rng(schedule.seed, "batches")
    report = TrainReport()
    batch_size = min(schedule.batch_size, len(dataset))
    started = time.perf_counter()

    for step in range(1, steps + 1):
        indices = np.sort(rng.choice(len(dataset), size=batch_size, replace=False))
        batch = dataset.subset(indices)
        loss, bce, dice = train_step(model, optimizer, batch.images, batch.masks, loss_cfg)
        report.merge_weight_drift = max(report.merge_weight_drift, see_merge_drift(model))
        row = {"step": step, "loss": loss, "bce": bce, "dice": dice}
        if step % schedule.eval_every == 0 or step == steps:
            metrics = evaluate(model, heldout, schedule.batch_size)
            row.update(metrics)
            report.final_metrics = metrics
            if verbose:
                print(f"step {step}/{steps} loss={loss:.4f} miou={metrics['miou']:.3f} mae={metrics['mae']:.3f}")
        report.rows.append(row)

    report.seconds_per_step = (time.perf_counter() - started) / steps
    report.frozen_unchanged = encode(model.state(frozen=True)) == frozen_before
    if model.adapters:
        _, decisions = predict(model, heldout.images[:schedule.batch_size], schedule.batch_size)
        report.expert_usage = expert_usage(decisions[0])

    if writer is not None:
        writer.write_dataframe(report.to_frame(), "report.csv", header_comment=F_MEASURE_CONVENTION)
        report.checkpoint_path = writer.path("checkpoint.wten")
        save_checkpoint(model, report.checkpoint_path, extra={"params": count_params(model).as_dict()})
        print(f"✅ Wrote {report.checkpoint_path}")
    return report
