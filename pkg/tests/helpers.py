"""Shared generators for fuzzed superblocks, matrices, and program cases."""
from __future__ import annotations

import numpy as np

from fbfq.codec import (
    Q2KSuperBlock,
    Q3KSuperBlock,
    Q8KSuperBlock,
    Variant,
    quantize_sb,
    quantize_q8k,
)
from fbfq.driver import AccelCaps


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def random_fp16_bits(rng: np.random.Generator) -> int:
    """A uniformly random finite binary16 pattern (exponent field < 31)."""
    sign = int(rng.integers(0, 2)) << 15
    exp = int(rng.integers(0, 31)) << 10
    mant = int(rng.integers(0, 1024))
    return sign | exp | mant


def random_sb(rng: np.random.Generator, variant: Variant):
    """A random VALID superblock: arbitrary code bytes, finite scales."""
    if variant is Variant.Q2_K:
        return Q2KSuperBlock(
            scales=rng.integers(0, 256, 16, dtype=np.uint8).tobytes(),
            qs=rng.integers(0, 256, 64, dtype=np.uint8).tobytes(),
            d=random_fp16_bits(rng),
            dmin=random_fp16_bits(rng),
        )
    if variant is Variant.Q3_K:
        return Q3KSuperBlock(
            hmask=rng.integers(0, 256, 32, dtype=np.uint8).tobytes(),
            qs=rng.integers(0, 256, 64, dtype=np.uint8).tobytes(),
            scales=rng.integers(0, 256, 12, dtype=np.uint8).tobytes(),
            d=random_fp16_bits(rng),
        )
    return Q8KSuperBlock(
        d=random_fp16_bits(rng),
        qs=rng.integers(0, 256, 256, dtype=np.uint8).tobytes(),
    )


def random_vec(rng: np.random.Generator, n: int = 256, scale: float = 1.0) -> np.ndarray:
    return (rng.standard_normal(n) * scale).astype(np.float64)


def quantized_pair(rng: np.random.Generator, variant: Variant):
    """(weight SB, input SB) from quantizing O(1) random vectors."""
    w = quantize_sb(random_vec(rng), variant)
    x = quantize_q8k(random_vec(rng))
    return w, x


GENEROUS_CAPS = AccelCaps(weight_cache_sb=64, input_cache_sb=1024, n_fifos=4, out_buf_elems=4096)


def tight_caps(rng: np.random.Generator) -> AccelCaps:
    """Small capacities that force multi-tile plans and K-splitting."""
    return AccelCaps(
        weight_cache_sb=int(rng.integers(1, 5)),
        input_cache_sb=int(rng.integers(2, 9)),
        n_fifos=int(rng.integers(1, 5)),
        out_buf_elems=int(rng.integers(4, 33)),
    )
