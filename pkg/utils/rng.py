"""
Named PRNG streams
Counter-based (Philox) generators keyed by (seed, name) so every weight and
every dataset sample draws from its own reproducible stream
"""

import hashlib

import numpy as np
from scipy.stats import truncnorm

INIT_STD = 0.02


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{int(seed) & (2**64 - 1)}:{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


def trunc_normal(seed: int, name: str, shape, std: float = INIT_STD) -> np.ndarray:
    """Truncated normal at two standard deviations"""
    draws = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=named_rng(seed, name))
    return np.asarray(draws, dtype=np.float64).reshape(shape)
