import tracemalloc

import numpy as np
import pandas as pd
import pytest

from scripts.ablation_suite import ablation_variants
from scripts.bench import run_bench, trainable_ordering_holds
from scripts.model import WeftModel
from scripts.optimizer import FrozenParameterError
from scripts.run_config import RunConfig, ScheduleConfig
from scripts.synth_dataset import make_split
from scripts.trainer import REPORT_COLUMNS, predict, train
from scripts.weft import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_VERIFY, WeftCommands, exit_code_for, main
from utils.config import ConfigError
from utils.tensor import NumericalFailure
from utils.wten import read_wten


@pytest.fixture
def tiny_run(small_config):
    schedule = ScheduleConfig(seed=7, steps=2, batch_size=2, eval_every=1, train_count=4, heldout_count=2)
    return RunConfig(model=small_config, schedule=schedule).validate()


@pytest.fixture
def trained_dir(tiny_run, tmp_path):
    out = tmp_path / "run"
    assert WeftCommands().cmd_train(tiny_run, str(out)) == EXIT_OK
    return out


class TestTrain:
    def test_rejects_zero_steps(self, small_config, tiny_run):
        split = make_split(0, 2, small_config.image_size)
        with pytest.raises(ValueError, match="steps"):
            train(WeftModel(small_config), split, 0, tiny_run.schedule)

    def test_report_rows_and_frozen_contract(self, small_config, tiny_run):
        split = make_split(0, 4, small_config.image_size)
        report = train(WeftModel(small_config), split, 2, tiny_run.schedule, verbose=False)
        frame = report.to_frame()
        assert list(frame.columns) == REPORT_COLUMNS
        assert frame["step"].tolist() == [1, 2]
        assert np.isfinite(frame["loss"]).all()
        assert report.frozen_unchanged
        assert report.merge_weight_drift <= 1e-7
        assert report.expert_usage.shape == (4, 7)

    def test_parameters_move(self, small_config, tiny_run):
        model = WeftModel(small_config)
        before = model.state(frozen=False)
        train(model, make_split(0, 4, small_config.image_size), 1, tiny_run.schedule, verbose=False)
        after = model.state(frozen=False)
        assert any(not np.array_equal(before[name], after[name]) for name in before)

    def test_nan_loss_names_the_op(self, small_config, tiny_run):
        model = WeftModel(small_config)
        head = model.parameters()["decoder.head.b"]
        head.data = np.array([np.nan])
        with pytest.raises(NumericalFailure):
            train(model, make_split(0, 2, small_config.image_size), 1, tiny_run.schedule, verbose=False)

    def test_predict_saturates_without_overflow(self, small_config):
        model = WeftModel(small_config)
        images = make_split(0, 2, small_config.image_size).images
        for bias in (-1e4, 1e4):
            model.parameters()["decoder.head.b"].data = np.array([bias], dtype=np.float32)
            with np.errstate(over="raise"):
                probs, _ = predict(model, images)
            assert np.isfinite(probs).all()
            assert ((probs >= 0.0) & (probs <= 1.0)).all()


class TestTrainCommand:
    def test_artifacts(self, trained_dir):
        for name in ("report.csv", "checkpoint.wten", "checkpoint.json", "resolved_config.env", "frozen_init.wten"):
            assert (trained_dir / name).exists(), name
        lines = (trained_dir / "report.csv").read_text().splitlines()
        assert lines[0].startswith("# f_measure")
        assert lines[1] == ",".join(REPORT_COLUMNS)

    def test_frozen_subset_is_byte_identical(self, trained_dir):
        initial = read_wten(str(trained_dir / "frozen_init.wten"))
        final = read_wten(str(trained_dir / "checkpoint.wten"))
        assert initial
        for name, array in initial.items():
            assert final[name].tobytes() == array.tobytes()

    def test_same_seed_same_bytes(self, tiny_run, trained_dir, tmp_path):
        again = tmp_path / "again"
        assert WeftCommands().cmd_train(tiny_run, str(again)) == EXIT_OK
        for name in ("report.csv", "checkpoint.wten"):
            assert (again / name).read_bytes() == (trained_dir / name).read_bytes()

    def test_eval_round_trip(self, tiny_run, trained_dir, tmp_path):
        data_dir = tmp_path / "data"
        assert WeftCommands().cmd_synth(tiny_run, str(data_dir)) == EXIT_OK
        out = tmp_path / "eval"
        assert WeftCommands().cmd_eval(str(trained_dir / "checkpoint.wten"), str(data_dir), str(out)) == EXIT_OK
        predictions = read_wten(str(out / "predictions.wten"))
        assert len(predictions) == tiny_run.schedule.train_count
        assert predictions["sample0.prob"].shape == (1, 64, 64)

    def test_eval_rejects_mismatched_image_size(self, trained_dir, tmp_path, capsys):
        data_dir = tmp_path / "data96"
        big = RunConfig().replace(image_size=96, train_count=1)
        assert WeftCommands().cmd_synth(big, str(data_dir)) == EXIT_OK
        code = WeftCommands().cmd_eval(str(trained_dir / "checkpoint.wten"), str(data_dir), str(tmp_path / "e"))
        assert code == EXIT_CONFIG
        assert "checkpoint expects" in capsys.readouterr().out

    def test_eval_reports_corrupt_checkpoint(self, trained_dir, tmp_path, capsys):
        (trained_dir / "checkpoint.wten").write_bytes(b"JUNK" + bytes(12))
        code = WeftCommands().cmd_eval(str(trained_dir / "checkpoint.wten"), str(tmp_path), str(tmp_path / "e"))
        assert code == EXIT_CONFIG
        assert "byte offset 0" in capsys.readouterr().out

    def test_eval_reports_failed_prediction_write(self, tiny_run, trained_dir, tmp_path, capsys):
        data_dir = tmp_path / "data"
        assert WeftCommands().cmd_synth(tiny_run, str(data_dir)) == EXIT_OK
        out = tmp_path / "eval"
        (out / "predictions.wten").mkdir(parents=True)
        code = WeftCommands().cmd_eval(str(trained_dir / "checkpoint.wten"), str(data_dir), str(out))
        assert code == EXIT_CONFIG
        assert "Write failed" in capsys.readouterr().out

    def test_train_into_a_file_path_is_a_config_error(self, tiny_run, tmp_path):
        blocker = tmp_path / "taken"
        blocker.write_text("")
        assert WeftCommands().cmd_train(tiny_run, str(blocker)) == EXIT_CONFIG


class TestMain:
    def test_config_error_exit(self, tmp_path):
        path = tmp_path / "bad.env"
        path.write_text("STEPS=0\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG

    def test_train_through_main(self, tiny_run, tmp_path):
        path = tmp_path / "run.env"
        path.write_text(tiny_run.to_env())
        out = tmp_path / "out"
        assert main(["train", "--config", str(path), "--k-experts", "2", "--no-see", "--out", str(out)]) == EXIT_OK
        resolved = (out / "resolved_config.env").read_text().splitlines()
        assert "K_EXPERTS=2" in resolved
        assert "USE_SEE=false" in resolved

    def test_exit_codes(self):
        assert exit_code_for(NumericalFailure("log", 3)) == EXIT_NUMERIC
        assert exit_code_for(ConfigError("bad")) == EXIT_CONFIG
        assert exit_code_for(FrozenParameterError("backbone.block1.attn.qkv.w")) == EXIT_VERIFY

    def test_frozen_gradient_during_train_is_a_verification_exit(self, tiny_run, tmp_path, monkeypatch):
        def leaking_train(*args, **kwargs):
            raise FrozenParameterError("backbone.patch.w")

        monkeypatch.setattr("scripts.weft.train", leaking_train)
        assert WeftCommands().cmd_train(tiny_run, str(tmp_path / "out")) == EXIT_VERIFY


class TestBenchAndAblations:
    def test_bench_orders_trainable_counts(self, tiny_run):
        table = run_bench(tiny_run.replace(steps=1))
        assert table["regime"].tolist() == ["frozen", "lora", "vpt", "weft", "full"]
        assert trainable_ordering_holds(table)
        assert (table["peak_mem_mb"] > 0).all()

    def test_ordering_check_detects_violations(self):
        table = pd.DataFrame({"regime": ["frozen", "weft", "full"], "trainable_params": [5, 3, 9]})
        assert not trainable_ordering_holds(table)

    def test_ordering_check_covers_the_peft_baselines(self):
        table = pd.DataFrame({"regime": ["frozen", "lora", "vpt", "weft", "full"],
                              "trainable_params": [5, 11, 4, 20, 90]})
        assert not trainable_ordering_holds(table)

    def test_bench_stops_memory_tracing_when_training_fails(self, tiny_run, monkeypatch):
        def failing_train(*args, **kwargs):
            raise NumericalFailure("log", 0)

        monkeypatch.setattr("scripts.bench.train", failing_train)
        with pytest.raises(NumericalFailure):
            run_bench(tiny_run.replace(steps=1))
        assert not tracemalloc.is_tracing()

    def test_every_ablation_variant_is_a_valid_config(self, tiny_run):
        variants = ablation_variants()
        assert len(variants) == 13
        for _, _, _, changes in variants:
            tiny_run.replace(**changes)


@pytest.mark.slow
def test_loss_falls_on_the_default_task():
    config = RunConfig().replace(steps=200, eval_every=200)
    s = config.schedule
    finals = []
    for seed in (0, 1, 2):
        split = make_split(seed, s.train_count, config.model.image_size)
        report = train(WeftModel(config.model, seed=seed), split, 200, s, config.loss, verbose=False)
        early = np.mean([report.loss_at(step) for step in range(6, 11)])
        late = np.mean([report.loss_at(step) for step in range(196, 201)])
        finals.append(late < early)
    assert sum(finals) >= 2


def _heldout_miou(config: RunConfig, seed: int) -> float:
    s = config.schedule
    size = config.model.image_size
    split = make_split(seed, s.train_count, size)
    heldout = make_split(seed, s.heldout_count, size, start=s.train_count)
    report = train(WeftModel(config.model, seed=seed), split, s.steps, s, config.loss, heldout=heldout,
                   verbose=False)
    return report.final_metrics["miou"]


@pytest.mark.slow
def test_weft_beats_frozen_on_the_default_task():
    config = RunConfig()
    weft = np.median([_heldout_miou(config, seed) for seed in (0, 1, 2)])
    frozen = np.median([_heldout_miou(config.replace(regime="frozen"), seed) for seed in (0, 1, 2)])
    assert weft >= 0.80
    assert weft >= frozen + 0.05


@pytest.mark.slow
def test_four_experts_match_or_beat_one():
    config = RunConfig()
    four = np.median([_heldout_miou(config.replace(k_experts=4), seed) for seed in (0, 1, 2)])
    one = np.median([_heldout_miou(config.replace(k_experts=1), seed) for seed in (0, 1, 2)])
    assert four >= one


@pytest.mark.slow
@pytest.mark.parametrize("subspaces", [2, 4, 8, 16])
def test_every_subspace_count_trains(subspaces):
    config = RunConfig().replace(subspaces=subspaces, steps=50, eval_every=50)
    assert np.isfinite(_heldout_miou(config, 0))


@pytest.mark.slow
def test_merge_weights_stay_normalised_over_500_steps(small_config):
    schedule = ScheduleConfig(steps=500, eval_every=500, train_count=8, heldout_count=2)
    split = make_split(0, schedule.train_count, small_config.image_size)
    report = train(WeftModel(small_config), split, 500, schedule, verbose=False)
    assert report.merge_weight_drift <= 1e-7
