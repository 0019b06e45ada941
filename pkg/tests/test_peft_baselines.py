import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from scripts.model import ModelConfig, WeftModel, count_params
from scripts.peft_baselines import LowRankDelta, PromptTokens
from utils import functional as F
from utils.config import ConfigError
from utils.tensor import Tape, Tensor, backward


@pytest.fixture
def image(rng):
    return Tensor(rng.uniform(0.0, 1.0, (2, 3, 64, 64)))


def regime(config, name, **changes):
    return WeftModel(dataclasses.replace(config, regime=name, **changes))


class TestLowRankDelta:
    def test_starts_at_zero(self, rng):
        delta = LowRankDelta("lora.test", 0, 16, 48, rank=4)
        out = delta(Tensor(rng.standard_normal((2, 5, 16))))
        assert out.shape == (2, 5, 48)
        assert_array_equal(out.data, 0.0)

    def test_lora_at_init_matches_the_frozen_regime(self, small_config, image):
        frozen = regime(small_config, "frozen")(image)
        lora = regime(small_config, "lora")(image)
        assert lora.shape == (2, 1, 64, 64)
        assert_array_equal(lora.data, frozen.data)

    def test_trained_delta_changes_the_output(self, small_config, image):
        model = regime(small_config, "lora")
        before = model(image).data.copy()
        model.parameters()["lora.block2.proj.b"].data = np.full((4, 16), 0.5, dtype=np.float32)
        assert not np.array_equal(model(image).data, before)


class TestPromptTokens:
    def test_token_count_is_preserved(self, small_config, rng):
        model = regime(small_config, "vpt")
        tokens = model.backbone.embed(Tensor(rng.uniform(0.0, 1.0, (2, 3, 64, 64))))
        out = model.prompts(model.backbone, 1, tokens)
        assert out.shape == tokens.shape

    def test_prompts_change_the_output(self, small_config, image):
        frozen = regime(small_config, "frozen")(image)
        vpt = regime(small_config, "vpt")(image)
        assert vpt.shape == (2, 1, 64, 64)
        assert np.all(np.isfinite(vpt.data))
        assert not np.array_equal(vpt.data, frozen.data)

    def test_one_prompt_set_per_block(self):
        names = sorted(PromptTokens("vpt", 0, 16, count=3, depth=4).parameters())
        assert names == [f"vpt.block{i}.prompts" for i in range(1, 5)]


class TestCounts:
    def test_small_config_adds_exactly_the_delta_and_prompt_params(self, small_config):
        frozen = count_params(regime(small_config, "frozen")).trainable
        # rank 4 on a 16 -> 48 qkv and a 16 -> 16 proj, four blocks
        assert count_params(regime(small_config, "lora")).trainable - frozen == 4 * (4 * 64 + 4 * 32)
        assert count_params(regime(small_config, "vpt")).trainable - frozen == 4 * 8 * 16

    def test_default_config(self):
        assert count_params(WeftModel(ModelConfig(regime="frozen"))).trainable == 5_697
        assert count_params(WeftModel(ModelConfig(regime="lora"))).trainable == 11_841
        assert count_params(WeftModel(ModelConfig(regime="vpt"))).trainable == 7_745

    def test_backbone_stays_frozen(self, small_config):
        for name in ("lora", "vpt"):
            counts = count_params(regime(small_config, name))
            assert counts.frozen == count_params(regime(small_config, "frozen")).frozen

    @pytest.mark.parametrize("changes", [{"lora_rank": 0}, {"prompt_tokens": 0}])
    def test_sizes_must_be_positive(self, small_config, changes):
        with pytest.raises(ConfigError):
            dataclasses.replace(small_config, **changes).validate()


@pytest.mark.parametrize("name, prefix", [("lora", "lora."), ("vpt", "vpt.")])
def test_gradients_reach_only_the_baseline_and_decoder(small_config, image, name, prefix):
    model = regime(small_config, name)
    params = model.parameters()
    with Tape() as tape:
        loss = F.mean(model(image))
    grads = backward(tape, loss, params)
    assert not any(params[n].frozen for n in grads)
    assert not any(n.startswith("backbone.") for n in grads)
    assert {n.split(".")[0] for n in grads} == {prefix.rstrip("."), "decoder"}
    assert any(np.any(grads[n] != 0.0) for n in grads if n.startswith(prefix))
