import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from scripts.model import ModelConfig  # noqa: E402
from utils.tensor import precision  # noqa: E402


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def small_config():
    """64x64 images: frozen grid 4x4, trainable maps 16/8/4/2"""
    return ModelConfig(image_size=64, channels=8, frozen_dim=16, heads=2, frozen_mlp_dim=32, k_experts=4,
                       subspaces=4, points=2, decoder_width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
