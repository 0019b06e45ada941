#!/usr/bin/env python3
"""
Ablation Suite
Trains the expert-count, subspace-count and component variants in sequence
and writes ablation_summary.csv
"""

import os
import sys
from typing import Dict, List, Tuple

import pandas as pd
from dotenv import load_dotenv

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from scripts.model import WeftModel, count_params
from scripts.optimizer import FrozenParameterError
from scripts.run_config import RunConfig, load_run_config
from scripts.synth_dataset import make_split
from scripts.trainer import train
from utils.config import ConfigError
from utils.run_writer import RunWriter
from utils.tensor import NumericalFailure

load_dotenv()

SUMMARY_COLUMNS = ["variant", "knob", "value", "trainable_params", "final_loss", "miou", "mdice", "mae", "f_measure"]

COMPONENT_VARIANTS = {
    "base": {"regime": "frozen"},
    "+twe": {"use_esto": False, "use_see": False},
    "+twe+esto": {"use_see": False},
    "+twe+see": {"use_esto": False},
    "weft": {},
}


def ablation_variants() -> List[Tuple[str, str, object, Dict[str, object]]]:
    variants = [(f"k={k}", "k_experts", k, {"k_experts": k}) for k in (1, 2, 4, 6)]
    variants += [(f"h={h}", "subspaces", h, {"subspaces": h}) for h in (2, 4, 8, 16)]
    variants += [(name, "components", name, changes) for name, changes in COMPONENT_VARIANTS.items()]
    return variants


def run_ablation_suite(base_config: RunConfig, out_dir: str) -> pd.DataFrame:
    s = base_config.schedule
    size = base_config.model.image_size
    print(f"=== Ablation suite: {len(ablation_variants())} variants, {s.steps} steps each ===")
    train_split = make_split(s.seed, s.train_count, size)
    heldout = make_split(s.seed, s.heldout_count, size, start=s.train_count)

    rows = []
    for i, (variant, knob, value, changes) in enumerate(ablation_variants(), start=1):
        print(f"\n{i}. Variant {variant}...")
        try:
            config = base_config.replace(**changes)
            model = WeftModel(config.model, seed=s.seed)
            report = train(model, train_split, s.steps, s, config.loss, heldout=heldout, verbose=False)
        except (ConfigError, ValueError, NumericalFailure, FrozenParameterError) as e:
            print(f"Variant {variant} failed (non-critical): {e}")
            continue
        rows.append({
            "variant": variant,
            "knob": knob,
            "value": value,
            "trainable_params": count_params(model).trainable,
            "final_loss": report.rows[-1]["loss"],
            **report.final_metrics,
        })
        print(f"{variant}: miou={report.final_metrics['miou']:.3f}")

    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    RunWriter(out_dir).write_dataframe(summary, "ablation_summary.csv")
    print("\n" + summary.to_string(index=False))
    print("\nAblation suite complete!")
    return summary


def main():
    import argparse

    parser = argparse.ArgumentParser(description="Run every ablation variant on the synthetic task")
    parser.add_argument("--config")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", default="runs/ablation")
    args = parser.parse_args()
    try:
        config = load_run_config(args.config, overrides={"steps": args.steps, "seed": args.seed})
    except ConfigError as e:
        print(f"Error in config: {e}")
        return 1
    try:
        run_ablation_suite(config, args.out)
    except OSError as e:
        print(f"Error in ablation suite: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
