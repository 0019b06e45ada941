import numpy as np
import pytest
from numpy.testing import assert_allclose

from scripts.wavelet_ops import SUBBANDS, Subbands, WaveletConv, haar_dwt2, haar_idwt2, wavelet_conv
from utils import functional as F
from utils.tensor import ShapeError, Tensor


def identity_kernels(channels, k):
    kernel = np.zeros((channels, 1, k, k))
    kernel[:, :, k // 2, k // 2] = 1.0
    return {band: Tensor(kernel) for band in SUBBANDS}


def brute_force_haar(x):
    """Per-block loops straight from the 2x2 Haar definition"""
    b, c, h, w = x.shape
    out = {band: np.zeros((b, c, h // 2, w // 2)) for band in SUBBANDS}
    for i in range(h // 2):
        for j in range(w // 2):
            a = x[:, :, 2 * i, 2 * j]
            bb = x[:, :, 2 * i, 2 * j + 1]
            cc = x[:, :, 2 * i + 1, 2 * j]
            d = x[:, :, 2 * i + 1, 2 * j + 1]
            out["ll"][:, :, i, j] = (a + bb + cc + d) / 2
            out["lh"][:, :, i, j] = (a + bb - cc - d) / 2
            out["hl"][:, :, i, j] = (a - bb + cc - d) / 2
            out["hh"][:, :, i, j] = (a - bb - cc + d) / 2
    return out


class TestHaar:
    def test_constant_block(self):
        bands = haar_dwt2(Tensor(np.ones((1, 1, 2, 2))))
        assert bands.ll.item() == pytest.approx(2.0)
        for band in (bands.lh, bands.hl, bands.hh):
            assert band.item() == pytest.approx(0.0)

    def test_matches_brute_force(self, rng):
        x = rng.standard_normal((2, 3, 6, 8))
        bands = haar_dwt2(Tensor(x)).as_dict()
        expected = brute_force_haar(x)
        for band in SUBBANDS:
            assert_allclose(bands[band].data, expected[band], atol=1e-5)

    def test_perfect_reconstruction(self, rng):
        x = rng.standard_normal((2, 4, 16, 12)).astype(np.float32)
        restored = haar_idwt2(haar_dwt2(Tensor(x)))
        assert np.max(np.abs(restored.data - x)) <= 1e-6

    def test_hundred_seeded_round_trips_keep_values_and_energy(self, f64):
        for seed in range(100):
            x = np.random.default_rng(seed).standard_normal((2, 8, 16, 16))
            bands = haar_dwt2(Tensor(x))
            restored = haar_idwt2(bands)
            assert np.max(np.abs(restored.data - x)) <= 1e-6
            energy = sum(float(np.sum(band.data ** 2)) for band in bands.as_dict().values())
            assert energy == pytest.approx(float(np.sum(x ** 2)), rel=1e-5)

    def test_energy_is_preserved(self, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        bands = haar_dwt2(Tensor(x)).as_dict()
        energy = sum(float(np.sum(band.data.astype(np.float64) ** 2)) for band in bands.values())
        assert energy == pytest.approx(float(np.sum(x ** 2)), rel=1e-5)

    def test_odd_size_asks_for_padding(self):
        with pytest.raises(ShapeError, match="pad"):
            haar_dwt2(Tensor(np.ones((1, 1, 5, 4))))

    def test_mismatched_subbands(self):
        bands = Subbands(*(Tensor(np.ones((1, 1, 2, 2))) for _ in range(3)), Tensor(np.ones((1, 1, 3, 2))))
        with pytest.raises(ShapeError):
            haar_idwt2(bands)


class TestWaveletConv:
    @pytest.mark.parametrize("k", [1, 3, 5, 13])
    def test_identity_kernels_reproduce_input(self, k, rng):
        x = rng.standard_normal((1, 2, 8, 8)).astype(np.float32)
        out = wavelet_conv(Tensor(x), identity_kernels(2, k))
        assert_allclose(out.data, x, atol=1e-5)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            wavelet_conv(Tensor(np.ones((1, 1, 4, 4))), {band: Tensor(np.ones((1, 1, 2, 2))) for band in SUBBANDS})
        with pytest.raises(ValueError, match="odd"):
            WaveletConv("wc", 0, 2, 4)

    def test_scaling_only_ll_low_passes(self, rng):
        """Zeroing every detail band leaves the block-mean image"""
        x = rng.standard_normal((1, 1, 4, 4))
        kernels = identity_kernels(1, 3)
        for band in ("lh", "hl", "hh"):
            kernels[band] = Tensor(np.zeros((1, 1, 3, 3)))
        out = wavelet_conv(Tensor(x), kernels).data
        block_means = x.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5))
        assert_allclose(out, np.repeat(np.repeat(block_means, 2, axis=2), 2, axis=3), atol=1e-5)

    def test_module_shape_and_parameter_names(self, rng):
        module = WaveletConv("twe.stage1.expert3", 7, 4, 5)
        assert sorted(module.parameters()) == sorted(f"twe.stage1.expert3.wc.{b}" for b in SUBBANDS)
        assert module.parameters()["twe.stage1.expert3.wc.ll"].shape == (4, 1, 5, 5)
        out = module(Tensor(rng.standard_normal((2, 4, 8, 8))))
        assert out.shape == (2, 4, 8, 8)

    def test_kernels_start_small_and_random(self):
        kernels = [p.data for p in WaveletConv("wc", 5, 3, 5).parameters().values()]
        for kernel in kernels:
            assert np.abs(kernel).max() <= 0.04
            assert np.std(kernel) > 0.0
        assert not np.array_equal(kernels[0], kernels[1])

    def test_output_is_linear_in_input(self, rng):
        module = WaveletConv("wc", 3, 2, 3)
        x, y = rng.standard_normal((2, 1, 2, 6, 6))
        lhs = module(Tensor(x + 2 * y)).data
        rhs = F.add(module(Tensor(x)), F.mul(module(Tensor(y)), 2.0)).data
        assert_allclose(lhs, rhs, atol=1e-4)
