import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from scripts.twe_extractor import (NUM_EXPERTS, Downsample, ExpertStage, RoutingDecision, TWEExtractor,
                                   WaveletExpert, expert_usage, renormalize_selected, top_k_indices)
from utils.tensor import ShapeError, Tensor


def uniform_stage(k=4, channels=8, use_router=True):
    stage = ExpertStage("twe.stage1", 0, channels, k, use_router)
    stage.gate_weight.data = np.zeros(stage.gate_weight.shape)
    return stage


class TestDownsample:
    def test_quarter_resolution(self, rng):
        out = Downsample("twe.stage1.downsample", 0, 32)(Tensor(rng.standard_normal((2, 3, 64, 64))))
        assert out.shape == (2, 32, 16, 16)

    def test_rejects_sizes_not_divisible_by_32(self):
        with pytest.raises(ShapeError):
            Downsample("ds", 0, 8)(Tensor(np.zeros((1, 3, 48, 48))))


class TestRouter:
    def test_uniform_logits_pick_first_four_at_a_quarter_each(self, rng):
        decision, _ = uniform_stage()(Tensor(rng.standard_normal((2, 8, 4, 4))))
        assert decision.selected_set(0) == {1, 2, 3, 4}
        assert decision.selected_set(1) == {1, 2, 3, 4}
        assert_allclose(decision.fused_weights, np.full((2, 4), 0.25), rtol=1e-6)

    def test_renormalisation_is_shift_invariant(self, rng):
        alpha = rng.standard_normal((3, NUM_EXPERTS))
        selected = top_k_indices(alpha, 4)
        base = renormalize_selected(Tensor(alpha), selected).data
        shifted = renormalize_selected(Tensor(alpha + 5.0), selected).data
        assert_allclose(base, shifted, rtol=1e-5)

    def test_weights_sum_to_one_and_vanish_off_selection(self, rng):
        alpha = rng.standard_normal((4, NUM_EXPERTS))
        selected = top_k_indices(alpha, 3)
        weights = renormalize_selected(Tensor(alpha), selected).data
        assert_allclose(weights.sum(axis=-1), np.ones(4), rtol=1e-6)
        assert np.count_nonzero(weights, axis=-1).tolist() == [3, 3, 3, 3]

    def test_k_equal_seven_is_plain_softmax(self, rng):
        alpha = rng.standard_normal((1, NUM_EXPERTS))
        weights = renormalize_selected(Tensor(alpha), top_k_indices(alpha, 7)).data
        expected = np.exp(alpha) / np.exp(alpha).sum()
        assert_allclose(weights, expected, rtol=1e-5)

    def test_top_k_prefers_lower_index_on_ties(self):
        assert_array_equal(top_k_indices(np.array([[0.1, 0.3, 0.3, 0.2]]), 2), [[1, 2]])

    def test_weights_sum_to_one_over_a_thousand_gate_states(self):
        rng = np.random.default_rng(1000)
        logits = rng.normal(scale=3.0, size=(1000, NUM_EXPERTS))
        alpha = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        for k in (1, 2, 4, 6, 7):
            weights = renormalize_selected(Tensor(alpha), top_k_indices(alpha, k)).data
            assert np.abs(weights.sum(axis=-1) - 1.0).max() <= 1e-6

    def test_gate_logit_offset_changes_nothing(self, rng):
        stage = ExpertStage("twe.stage1", 3, 8, k=4)
        stage.gate_bias.data = rng.standard_normal(NUM_EXPERTS).astype(np.float32)
        f_m = Tensor(rng.standard_normal((2, 8, 4, 4)))
        decision, _ = stage(f_m)
        stage.gate_bias.data = stage.gate_bias.data + np.float32(4.0)
        shifted, _ = stage(f_m)
        assert_array_equal(shifted.selected_indices, decision.selected_indices)
        assert_allclose(shifted.fused_weights, decision.fused_weights, atol=1e-6)

    def test_relabelling_experts_relabels_the_weights(self, rng):
        alpha = rng.standard_normal((5, NUM_EXPERTS))
        perm = rng.permutation(NUM_EXPERTS)
        weights = renormalize_selected(Tensor(alpha), top_k_indices(alpha, 4)).data
        permuted = renormalize_selected(Tensor(alpha[:, perm]), top_k_indices(alpha[:, perm], 4)).data
        assert_allclose(permuted, weights[:, perm], rtol=1e-6)

    def test_one_clear_winner_and_a_tied_tail(self):
        logits = np.array([[2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
        alpha = np.exp(logits) / np.exp(logits).sum()
        selected = top_k_indices(alpha, 4)
        assert_array_equal(selected, [[0, 1, 2, 3]])
        weights = renormalize_selected(Tensor(alpha), selected).data
        kept = np.exp(alpha[0, :4])
        assert_allclose(weights[0, :4], kept / kept.sum(), rtol=1e-6)
        assert_array_equal(weights[0, 4:], 0.0)

    @pytest.mark.parametrize("k", [0, 8])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            top_k_indices(np.zeros((1, NUM_EXPERTS)), k)

    def test_router_off_uses_every_expert_equally(self, rng):
        decision, fused = uniform_stage(use_router=False)(Tensor(rng.standard_normal((1, 8, 4, 4))))
        assert decision.selected_set() == set(range(1, 8))
        assert_allclose(decision.fused_weights, np.full((1, 7), 1 / 7), rtol=1e-6)
        assert fused.shape == (1, 8, 4, 4)

    def test_selected_expert_must_be_computed(self, rng):
        stage = uniform_stage()
        f_m = Tensor(rng.standard_normal((1, 8, 4, 4)))
        bank = stage.build_experts(f_m, only={5})
        with pytest.raises(ValueError, match="expert 1"):
            stage.route_topk(f_m, bank)

    def test_only_selected_experts_are_built(self, rng):
        stage = uniform_stage(k=2)
        bank = stage.build_experts(Tensor(rng.standard_normal((1, 8, 4, 4))), only={0, 1})
        assert [e is not None for e in bank.experts] == [True, True] + [False] * 5


class TestExperts:
    @pytest.mark.parametrize("number, kernel", [(1, 1), (4, 7), (7, 13)])
    def test_kernel_size_grows_with_expert_number(self, number, kernel):
        assert WaveletExpert("e", 0, 8, number).kernel_size == kernel

    def test_expert_preserves_shape(self, rng):
        out = WaveletExpert("e", 0, 8, 3)(Tensor(rng.standard_normal((2, 8, 8, 8))))
        assert out.shape == (2, 8, 8, 8)

    def test_zero_mix_leaves_the_residual(self, rng):
        expert = WaveletExpert("e", 0, 8, 2)
        expert.mix.weight.data = np.zeros(expert.mix.weight.shape)
        x = rng.standard_normal((1, 8, 4, 4)).astype(np.float32)
        assert_allclose(expert(Tensor(x)).data, x, atol=1e-7)

    def test_channels_must_split_into_chain_groups(self):
        with pytest.raises(ValueError):
            ExpertStage("s", 0, 6)


class TestExtractor:
    @pytest.mark.parametrize("size, maps", [(64, [16, 8, 4, 2]), (128, [32, 16, 8, 4])])
    def test_pyramid_shapes(self, size, maps, rng):
        pyramid = TWEExtractor(0, channels=8)(Tensor(rng.standard_normal((1, 3, size, size))))
        assert [f.shape for f in pyramid.features] == [(1, 8, s, s) for s in maps]
        assert len(pyramid.decisions) == 4

    def test_every_stage_picks_k_distinct_experts(self, rng):
        pyramid = TWEExtractor(3, channels=8, k=2)(Tensor(rng.standard_normal((2, 3, 64, 64))))
        for decision in pyramid.decisions:
            assert decision.selected_indices.shape == (2, 2)
            assert all(len(set(row)) == 2 for row in decision.selected_indices.tolist())
            assert_allclose(decision.fused_weights.sum(axis=-1), np.ones(2), rtol=1e-5)

    def test_deterministic_for_a_seed(self, rng):
        image = Tensor(rng.standard_normal((1, 3, 64, 64)))
        first = TWEExtractor(5, channels=8)(image).features[-1].data
        second = TWEExtractor(5, channels=8)(image).features[-1].data
        assert first.tobytes() == second.tobytes()


def test_expert_usage_counts_selections_per_stage():
    decisions = [
        RoutingDecision(np.array([[1, 2], [1, 3]]), np.full((2, 2), 0.5)),
        RoutingDecision(np.array([[7, 6], [7, 6]]), np.full((2, 2), 0.5)),
    ]
    usage = expert_usage(decisions)
    assert usage.shape == (2, NUM_EXPERTS)
    assert_allclose(usage[0], [1.0, 0.5, 0.5, 0, 0, 0, 0])
    assert_allclose(usage[1], [0, 0, 0, 0, 0, 1.0, 1.0])
