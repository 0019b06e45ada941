#!/usr/bin/env python3
"""
WEFT command line
train / eval / gradcheck / bench / synth
Exit codes: 0 ok, 1 config or input error, 2 numeric failure, 3 verification failure
"""

import argparse
import os
import sys

from dotenv import load_dotenv

load_dotenv()

# Thread caps must be in place before numpy loads its BLAS
_threads = os.getenv("WEFT_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = _threads

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from scripts.bench import run_bench, trainable_ordering_holds  # noqa: E402
from scripts.gradcheck_suite import run_gradcheck  # noqa: E402
from scripts.model import REGIMES, WeftModel, count_params, load_checkpoint  # noqa: E402
from scripts.optimizer import FrozenParameterError  # noqa: E402
from scripts.run_config import RunConfig, load_run_config  # noqa: E402
from scripts.synth_dataset import load_dataset, make_split, materialize_dataset  # noqa: E402
from scripts.metrics import segmentation_metrics  # noqa: E402
from scripts.trainer import predict, train  # noqa: E402
from utils.config import ConfigError  # noqa: E402
from utils.run_writer import RunWriter  # noqa: E402
from utils.tensor import NumericalFailure  # noqa: E402
from utils.wten import WtenFormatError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, NumericalFailure):
        return EXIT_NUMERIC
    if isinstance(exc, FrozenParameterError):
        return EXIT_VERIFY
    return EXIT_CONFIG


class WeftCommands:
    """Each cmd_* returns an exit code; errors are reported here and nowhere else"""

    def cmd_train(self, config: RunConfig, out_dir: str) -> int:
        s = config.schedule
        print(f"=== WEFT train: regime={config.model.regime} steps={s.steps} seed={s.seed} ===")
        try:
            writer = RunWriter(out_dir)
            writer.write_text(config.to_env(), "resolved_config.env")

            print("\n1. Generating synthetic splits...")
            train_split = make_split(s.seed, s.train_count, config.model.image_size)
            heldout = make_split(s.seed, s.heldout_count, config.model.image_size, start=s.train_count)

            print("\n2. Building model...")
            model = WeftModel(config.model, seed=s.seed)
            counts = count_params(model)
            print(f"Parameters: {counts.trainable:,} trainable / {counts.total:,} total ({counts.fraction:.2%})")

            print("\n3. Training...")
            report = train(model, train_split, s.steps, s, config.loss, heldout=heldout, writer=writer)
        except (ConfigError, ValueError, OSError, NumericalFailure, FrozenParameterError) as e:
            print(f"Error in train: {e}")
            return exit_code_for(e)

        if report.expert_usage is not None:
            print("\nExpert selection frequency (rows = stages, columns = experts 1..7):")
            print(np.array2string(report.expert_usage, precision=2))
        print(f"\nFinal held-out: {report.final_metrics}")
        if not report.frozen_unchanged:
            print("❌ Frozen parameters changed during training")
            return EXIT_VERIFY
        print("Training complete!")
        return EXIT_OK

    def cmd_eval(self, checkpoint: str, dataset_dir: str, out_dir: str) -> int:
        print(f"=== WEFT eval: {checkpoint} on {dataset_dir} ===")
        try:
            model = load_checkpoint(checkpoint)
            dataset = load_dataset(dataset_dir)
            size = model.config.image_size
            if dataset.images.shape[2:] != (size, size):
                raise ConfigError(f"dataset images are {dataset.images.shape[2:]}, checkpoint expects ({size}, {size})")
            probs, _ = predict(model, dataset.images)
            metrics = segmentation_metrics(probs[:, 0], dataset.masks[:, 0])
            writer = RunWriter(out_dir)
            writer.write_tensors({f"sample{i}.prob": probs[i] for i in range(len(probs))}, "predictions.wten")
        except (ConfigError, WtenFormatError, ValueError, OSError, KeyError) as e:
            print(f"Error in eval: {e}")
            return exit_code_for(e)

        print(pd.DataFrame([metrics]).to_string(index=False))
        return EXIT_OK

    def cmd_gradcheck(self, mode: str, seeds: int, out_dir: str = None) -> int:
        print(f"=== WEFT gradcheck: precision={mode}, {seeds} seeds ===")
        try:
            table = run_gradcheck(mode, range(seeds))
            print(table.to_string(index=False))
            if out_dir:
                RunWriter(out_dir).write_dataframe(table, f"gradcheck_{mode}.csv")
        except (ValueError, OSError, NumericalFailure) as e:
            print(f"Error in gradcheck: {e}")
            return exit_code_for(e)
        failed = table[~table["pass"]]
        print(f"\n{table['family'].nunique()} families, {len(table)} checks, {len(failed)} failed")
        return EXIT_OK if failed.empty else EXIT_VERIFY

    def cmd_bench(self, config: RunConfig, out_dir: str) -> int:
        print(f"=== WEFT bench: {', '.join(REGIMES)} for {config.schedule.steps} steps ===")
        try:
            table = run_bench(config)
            RunWriter(out_dir).write_dataframe(table, "bench.csv")
        except (ConfigError, ValueError, OSError, NumericalFailure, FrozenParameterError) as e:
            print(f"Error in bench: {e}")
            return exit_code_for(e)
        print(table.to_string(index=False))
        if not trainable_ordering_holds(table):
            print("❌ Trainable counts are not ordered frozen < lora, vpt, weft < full")
            return EXIT_VERIFY
        return EXIT_OK

    def cmd_synth(self, config: RunConfig, out_dir: str) -> int:
        s = config.schedule
        print(f"=== WEFT synth: {s.train_count} samples at {config.model.image_size}px ===")
        try:
            ok = materialize_dataset(s.seed, s.train_count, config.model.image_size, out_dir)
        except (ValueError, OSError) as e:
            print(f"Error in synth: {e}")
            return exit_code_for(e)
        return EXIT_OK if ok else EXIT_CONFIG


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--image-size", type=int)
    common.add_argument("--k-experts", type=int, choices=[1, 2, 4, 6, 7])
    common.add_argument("--subspaces", type=int, choices=[2, 4, 8, 16])
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--rho", type=float)
    common.add_argument("--regime", choices=list(REGIMES))
    common.add_argument("--decode-from", choices=["adapted", "frozen_out"])
    common.add_argument("--lora-rank", type=int)
    common.add_argument("--prompt-tokens", type=int)
    common.add_argument("--no-esto", action="store_true")
    common.add_argument("--no-see", action="store_true")
    common.add_argument("--no-router", action="store_true")
    common.add_argument("--out", default="runs/latest")

    parser = argparse.ArgumentParser(prog="weft", description="Wavelet-expert adapter fine-tuning at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write report, checkpoint, resolved config")
    eval_parser = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a WTEN dataset")
    eval_parser.add_argument("--checkpoint", required=True)
    eval_parser.add_argument("--dataset", required=True)
    grad_parser = sub.add_parser("gradcheck", parents=[common], help="finite-difference check every op family")
    grad_parser.add_argument("--precision", choices=["f32", "f64"], default="f32")
    grad_parser.add_argument("--seeds", type=int, default=20)
    sub.add_parser("bench", parents=[common], help="frozen, LoRA, prompts, WEFT and full fine-tuning side by side")
    synth_parser = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as WTEN")
    synth_parser.add_argument("--count", type=int)
    return parser


def overrides_from_args(args) -> dict:
    overrides = {
        "seed": args.seed,
        "steps": args.steps,
        "image_size": args.image_size,
        "k_experts": args.k_experts,
        "subspaces": args.subspaces,
        "lam": args.lam,
        "rho": args.rho,
        "regime": args.regime,
        "decode_from": args.decode_from,
        "lora_rank": args.lora_rank,
        "prompt_tokens": args.prompt_tokens,
        "train_count": getattr(args, "count", None),
    }
    if args.no_esto:
        overrides["use_esto"] = False
    if args.no_see:
        overrides["use_see"] = False
    if args.no_router:
        overrides["use_twe_router"] = False
    return overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    commands = WeftCommands()
    if args.command == "gradcheck":
        return commands.cmd_gradcheck(args.precision, args.seeds, args.out)
    if args.command == "eval":
        return commands.cmd_eval(args.checkpoint, args.dataset, args.out)
    try:
        config = load_run_config(args.config, overrides=overrides_from_args(args))
    except ConfigError as e:
        print(f"Error in config: {e}")
        return EXIT_CONFIG
    if args.command == "train":
        return commands.cmd_train(config, args.out)
    if args.command == "bench":
        return commands.cmd_bench(config, args.out)
    return commands.cmd_synth(config, args.out)


if __name__ == "__main__":
    sys.exit(main())
