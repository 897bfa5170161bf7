"""Deterministic seed derivation.

Child seeds come from the splitmix64 generator: the ``index``-th output of a
splitmix64 stream started at ``base``. The state increment is odd and the
output mix is a bijection of 64-bit words, so distinct indices below 2**64
always give distinct child seeds.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def split_seed(base: int, index: int) -> int:
    """Seed of the ``index``-th child stream of ``base``."""
    return _mix64((int(base) + int(index) * GOLDEN_GAMMA) & MASK64)


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and an optional integer path."""
    return np.random.default_rng([int(seed) & MASK64, *(int(p) & MASK64 for p in path)])
