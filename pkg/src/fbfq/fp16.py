"""IEEE-754 binary16 bit-pattern conversions.

Superblock scales are stored as raw binary16 bit patterns (unsigned 16-bit
ints) while all arithmetic on decoded values happens in float32, so the two
functions here convert pattern <-> np.float32. Non-finite values are rejected
in both directions: quantizers never emit NaN or infinite scales, and none
are accepted back in.
"""
from __future__ import annotations

import numpy as np

from .errors import EncodeRange

_EXP_MASK = 0x7C00


def fp16_to_fp32(bits: int) -> np.float32:
    """Decode a binary16 bit pattern to a float32 scalar.

    Exact for every finite pattern (float32 is a superset of binary16).
    Raises EncodeRange for NaN/infinity patterns, ValueError if ``bits`` is
    not a 16-bit unsigned value.
    """
    if not 0 <= bits <= 0xFFFF:
        raise ValueError(f"binary16 pattern out of range: {bits!r}")
    if bits & _EXP_MASK == _EXP_MASK:
        raise EncodeRange(f"non-finite binary16 pattern 0x{bits:04x}")
    h = np.frombuffer(np.uint16(bits).tobytes(), dtype=np.float16)[0]
    return h.astype(np.float32)


def fp32_to_fp16(x: float) -> int:
    """Encode a finite value as the nearest binary16 pattern (ties to even).

    Underflow flushes through subnormals to signed zero as IEEE prescribes.
    NaN input or magnitude overflowing the finite binary16 range raises
    EncodeRange.
    """
    xf = np.float32(x)
    if not np.isfinite(xf):
        raise EncodeRange(f"cannot encode {x!r} as binary16")
    with np.errstate(over="ignore"):
        h = np.float16(xf)
    if np.isinf(h):
        raise EncodeRange(f"binary16 overflow encoding {float(xf)!r}")
    return int(np.frombuffer(h.tobytes(), dtype=np.uint16)[0])
