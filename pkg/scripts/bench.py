"""
Fine-tuning regime benchmark
frozen-only + decoder, LoRA, visual prompts, WEFT adapters and full fine-tuning
on one synthetic split
"""

import tracemalloc
from typing import Dict, List

import pandas as pd

from scripts.model import REGIMES, WeftModel, count_params
from scripts.run_config import RunConfig
from scripts.synth_dataset import make_split
from scripts.trainer import train

BENCH_COLUMNS = ["regime", "trainable_params", "total_params", "trainable_fraction", "sec_per_step",
                 "peak_mem_mb", "final_miou"]
PEFT_REGIMES = ("lora", "vpt", "weft")


def run_bench(config: RunConfig, verbose: bool = False) -> pd.DataFrame:
    s = config.schedule
    size = config.model.image_size
    train_split = make_split(s.seed, s.train_count, size)
    heldout = make_split(s.seed, s.heldout_count, size, start=s.train_count)

    rows: List[Dict[str, object]] = []
    for i, regime in enumerate(REGIMES, start=1):
        print(f"\n{i}. Training regime '{regime}' for {s.steps} steps...")
        regime_config = config.replace(regime=regime)
        tracemalloc.start()
        try:
            model = WeftModel(regime_config.model, seed=s.seed)
            report = train(model, train_split, s.steps, s, config.loss, heldout=heldout, verbose=verbose)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        counts = count_params(model)
        rows.append({
            "regime": regime,
            "trainable_params": counts.trainable,
            "total_params": counts.total,
            "trainable_fraction": counts.fraction,
            "sec_per_step": report.seconds_per_step,
            "peak_mem_mb": peak / 2 ** 20,
            "final_miou": report.final_metrics.get("miou", float("nan")),
        })
    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


def trainable_ordering_holds(table: pd.DataFrame) -> bool:
    """frozen < weft < full, and every parameter-efficient regime sits strictly between frozen and full"""
    counts = table.set_index("regime")["trainable_params"]
    if not counts["frozen"] < counts["weft"] < counts["full"]:
        return False
    return all(counts["frozen"] < counts[r] < counts["full"] for r in PEFT_REGIMES if r in counts.index)
