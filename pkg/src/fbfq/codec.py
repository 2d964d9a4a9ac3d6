"""Bit-exact codecs for the 256-weight superblock quantization formats.

Every superblock (SB) covers 256 consecutive values, subdivided into 16
blocks of 16. Serialized layouts are little-endian and pinned byte-for-byte
to the GGUF k-quant convention so tensors read from GGUF files decode
correctly:

  Q2_K, 84 bytes, 2.625 bits/weight
      scales[16] | qs[64] | d (binary16) | dmin (binary16)
      scales[j] holds block j's scale code in the low nibble and its min
      code in the high nibble. qs packs 2-bit quants: weight i lives in
      byte 32*(i//128) + (i%32) at bit offset 2*((i%128)//32).
      decode(i) = d*sc4(j)*q2(i) - dmin*mn4(j)   with j = i//16

  Q3_K, 110 bytes, 3.4375 bits/weight
      hmask[32] | qs[64] | scales[12] | d (binary16)
      qs packs the low 2 bits of each quant exactly like Q2_K. The high bit
      of weight i is bit (i//32) of hmask[i%32]. scales packs 16 6-bit
      codes: the low nibble of code j sits in scales[j%8] (nibble j//8) and
      the top 2 bits sit in scales[8 + j%4] at bit offset 2*(j//4).
      decode(i) = d*(sc6(j)-32)*(q3(i)-4)        with q3 = low2 + 4*hbit

  Q8_K, 258 bytes, 8.0625 bits/weight
      d (binary16) | qs[256] (signed bytes)
      decode(i) = d*qs[i]. Per-block sums of qs live on the in-memory
      superblock (bsums) because the fused Q2_K kernel consumes them; they
      are never serialized.

Quantizers are pure functions of the input vector: identical floats in give
identical bytes out. Quant-code rounding is round-half-away-from-zero
throughout; the binary16 scale encoding itself rounds to nearest-even.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import FormatError, InvalidInput, ShapeError
from .fp16 import fp16_to_fp32, fp32_to_fp16

SB_LEN = 256
BLOCK_LEN = 16
N_BLOCKS = 16

Q2K_BYTES = 84
Q3K_BYTES = 110
Q8K_BYTES = 258


class Variant(Enum):
    """Quantization format of a superblock or row."""

    Q2_K = "q2_k"
    Q3_K = "q3_k"
    Q8_K = "q8_k"


SB_BYTES = {
    Variant.Q2_K: Q2K_BYTES,
    Variant.Q3_K: Q3K_BYTES,
    Variant.Q8_K: Q8K_BYTES,
}

_VARIANT_ALIASES = {
    "q2k": Variant.Q2_K,
    "q2_k": Variant.Q2_K,
    "q3k": Variant.Q3_K,
    "q3_k": Variant.Q3_K,
    "q8k": Variant.Q8_K,
    "q8_k": Variant.Q8_K,
}


def parse_variant(name: str) -> Variant:
    """Map a user-facing variant name ("q2k", "q3_k", ...) to a Variant."""
    try:
        return _VARIANT_ALIASES[name.strip().lower()]
    except KeyError:
        raise FormatError(f"unknown variant {name!r}") from None


def bits_per_weight(variant: Variant) -> float:
    return SB_BYTES[variant] * 8 / SB_LEN


# Packing index maps. Weight i of a superblock touches:
#   2-bit lane:  byte 32*(i//128) + (i%32), shift 2*((i%128)//32)
#   high bit:    hmask byte i%32, bit i//32
_I = np.arange(SB_LEN)
_Q2_BYTE = 32 * (_I // 128) + (_I % 32)
_Q2_SHIFT = 2 * ((_I % 128) // 32)
_H_BYTE = _I % 32
_H_SHIFT = _I // 32
_BLOCK_OF = _I // BLOCK_LEN
_J = np.arange(N_BLOCKS)


def _unpack_q2(qs: bytes) -> np.ndarray:
    b = np.frombuffer(qs, dtype=np.uint8).astype(np.int64)
    return (b[_Q2_BYTE] >> _Q2_SHIFT) & 3


def _pack_q2(q: np.ndarray) -> bytes:
    out = np.zeros(64, dtype=np.int64)
    np.bitwise_or.at(out, _Q2_BYTE, (np.asarray(q, dtype=np.int64) & 3) << _Q2_SHIFT)
    return out.astype(np.uint8).tobytes()


def _unpack_hmask(hmask: bytes) -> np.ndarray:
    b = np.frombuffer(hmask, dtype=np.uint8).astype(np.int64)
    return (b[_H_BYTE] >> _H_SHIFT) & 1


def _pack_hmask(bits: np.ndarray) -> bytes:
    out = np.zeros(32, dtype=np.int64)
    np.bitwise_or.at(out, _H_BYTE, (np.asarray(bits, dtype=np.int64) & 1) << _H_SHIFT)
    return out.astype(np.uint8).tobytes()


def _unpack_sc6(scales: bytes) -> np.ndarray:
    s = np.frombuffer(scales, dtype=np.uint8).astype(np.int64)
    lo = (s[_J % 8] >> (4 * (_J // 8))) & 0xF
    hi = (s[8 + (_J % 4)] >> (2 * (_J // 4))) & 0x3
    return lo | (hi << 4)


def _pack_sc6(codes: np.ndarray) -> bytes:
    c = np.asarray(codes, dtype=np.int64)
    out = np.zeros(12, dtype=np.int64)
    np.bitwise_or.at(out, _J % 8, (c & 0xF) << (4 * (_J // 8)))
    np.bitwise_or.at(out, 8 + (_J % 4), ((c >> 4) & 0x3) << (2 * (_J // 4)))
    return out.astype(np.uint8).tobytes()


def _check_bytes(data: bytes, n: int, what: str) -> bytes:
    if not isinstance(data, (bytes, bytearray)):
        raise FormatError(f"{what} must be bytes, got {type(data).__name__}")
    if len(data) != n:
        raise FormatError(f"{what} must be {n} bytes, got {len(data)}")
    return bytes(data)


def _check_scale_bits(bits: int, what: str) -> None:
    if not isinstance(bits, int) or not 0 <= bits <= 0xFFFF:
        raise FormatError(f"{what} must be a 16-bit pattern, got {bits!r}")
    if bits & 0x7C00 == 0x7C00:
        raise FormatError(f"{what} is a non-finite binary16 pattern 0x{bits:04x}")


@dataclass(frozen=True)
class Q2KSuperBlock:
    """256 weights at 2 bits each plus per-block 4-bit scale and min codes."""

    scales: bytes  # 16 bytes, scale code low nibble / min code high nibble
    qs: bytes      # 64 bytes of packed 2-bit quants
    d: int         # binary16 super scale for the scale codes
    dmin: int      # binary16 super scale for the min codes

    def __post_init__(self):
        _check_bytes(self.scales, 16, "Q2_K scales")
        _check_bytes(self.qs, 64, "Q2_K qs")
        _check_scale_bits(self.d, "Q2_K d")
        _check_scale_bits(self.dmin, "Q2_K dmin")


@dataclass(frozen=True)
class Q3KSuperBlock:
    """256 weights at 3 bits each plus per-block 6-bit signed scale codes."""

    hmask: bytes   # 32 bytes of quant high bits
    qs: bytes      # 64 bytes of packed low 2 bits
    scales: bytes  # 12 bytes of packed 6-bit codes, bias 32
    d: int         # binary16 super scale

    def __post_init__(self):
        _check_bytes(self.hmask, 32, "Q3_K hmask")
        _check_bytes(self.qs, 64, "Q3_K qs")
        _check_bytes(self.scales, 12, "Q3_K scales")
        _check_scale_bits(self.d, "Q3_K d")


@dataclass(frozen=True)
class Q8KSuperBlock:
    """256 signed 8-bit values under a single binary16 scale.

    bsums holds the 16 per-block integer sums of qs. It is derived in the
    constructor and never serialized; the fused Q2_K*Q8_K kernel needs it.
    """

    d: int
    qs: bytes  # 256 signed bytes, two's complement
    bsums: tuple = field(init=False)

    def __post_init__(self):
        _check_scale_bits(self.d, "Q8_K d")
        _check_bytes(self.qs, SB_LEN, "Q8_K qs")
        s = np.frombuffer(self.qs, dtype=np.int8).astype(np.int32)
        sums = s.reshape(N_BLOCKS, BLOCK_LEN).sum(axis=1)
        object.__setattr__(self, "bsums", tuple(int(v) for v in sums))


SuperBlock = Q2KSuperBlock | Q3KSuperBlock | Q8KSuperBlock

_SB_CLASS = {
    Variant.Q2_K: Q2KSuperBlock,
    Variant.Q3_K: Q3KSuperBlock,
    Variant.Q8_K: Q8KSuperBlock,
}


def variant_of(sb: SuperBlock) -> Variant:
    for variant, cls in _SB_CLASS.items():
        if isinstance(sb, cls):
            return variant
    raise FormatError(f"not a superblock: {type(sb).__name__}")


def _check_vec(w) -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 1 or arr.size != SB_LEN:
        raise ShapeError(f"superblock input must be {SB_LEN} values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("superblock input contains non-finite values")
    return arr


def _round_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero. All quant-code rounding goes through here."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_q2k(w) -> Q2KSuperBlock:
    """Quantize 256 finite values to a Q2_K superblock.

    Per block the real min offset is max(0, -min(w)) and the real scale is
    (max(w) + min offset) / 3, so the 2-bit grid spans [-m, -m + 3*s]. Super
    scales d and dmin are the per-SB maxima divided by 15 (the 4-bit code
    ceiling), then each block's codes round against the binary16-rounded
    super scales. One least-squares pass re-fits the block scales against
    the chosen quants; the min side is kept fixed.
    """
    blocks = _check_vec(w).reshape(N_BLOCKS, BLOCK_LEN)
    mins = blocks.min(axis=1)
    # the where keeps the all-non-negative case at +0.0 (negating 0.0 would
    # otherwise propagate -0.0 into the encoded dmin)
    m_real = np.where(mins < 0.0, -mins, 0.0)
    s_real = (blocks.max(axis=1) + m_real) / 3.0

    dmin_bits = fp32_to_fp16(m_real.max() / 15.0)
    dm = float(fp16_to_fp32(dmin_bits))
    if dm > 0.0:
        mn4 = np.clip(_round_away(m_real / dm), 0, 15).astype(np.int64)
    else:
        mn4 = np.zeros(N_BLOCKS, dtype=np.int64)
    # dm and the codes are exactly representable, so these float64 products
    # equal the float32 decode values exactly
    ml = dm * mn4

    d_bits, sc4, q = _q2_fit(blocks, s_real, ml)
    num = (q * (blocks + ml[:, None])).sum(axis=1)
    den = (q * q).sum(axis=1)
    s_ref = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
    d_bits, sc4, q = _q2_fit(blocks, s_ref, ml)

    scales = (sc4 | (mn4 << 4)).astype(np.uint8).tobytes()
    return Q2KSuperBlock(scales=scales, qs=_pack_q2(q.reshape(SB_LEN)), d=d_bits, dmin=dmin_bits)


def _q2_fit(blocks: np.ndarray, s_real: np.ndarray, ml: np.ndarray):
    s_max = float(s_real.max())
    d_bits = fp32_to_fp16(s_max / 15.0 if s_max > 0.0 else 0.0)
    d = float(fp16_to_fp32(d_bits))
    if d > 0.0:
        sc4 = np.clip(_round_away(s_real / d), 0, 15).astype(np.int64)
    else:
        sc4 = np.zeros(N_BLOCKS, dtype=np.int64)
    dl = d * sc4
    q = np.zeros_like(blocks, dtype=np.int64)
    nz = dl > 0
    if nz.any():
        shifted = blocks[nz] + ml[nz][:, None]
        q[nz] = np.clip(_round_away(shifted / dl[nz][:, None]), 0, 3).astype(np.int64)
    return d_bits, sc4, q


def quantize_q3k(w) -> Q3KSuperBlock:
    """Quantize 256 finite values to a Q3_K superblock.

    The effective quants span [-4, 3], so each block's real scale is
    amax/4 when the largest-magnitude value is negative and amax/3
    otherwise. d is the per-SB max scale over 31 (the positive code
    ceiling); codes are round(s/d) + 32 clamped to [0, 63], and blocks
    whose code lands on 32 (effective zero) emit all-zero quants. One
    least-squares pass re-fits the block scales against the chosen quants.
    """
    blocks = _check_vec(w).reshape(N_BLOCKS, BLOCK_LEN)
    extreme = blocks[_J, np.abs(blocks).argmax(axis=1)]
    s_real = np.where(extreme < 0, np.abs(extreme) / 4.0, np.abs(extreme) / 3.0)

    d_bits, sc6, q_eff = _q3_fit(blocks, s_real)
    num = (q_eff * blocks).sum(axis=1)
    den = (q_eff * q_eff).sum(axis=1)
    s_ref = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
    d_bits, sc6, q_eff = _q3_fit(blocks, s_ref)

    q3 = (q_eff + 4).reshape(SB_LEN)
    return Q3KSuperBlock(
        hmask=_pack_hmask(q3 >> 2),
        qs=_pack_q2(q3 & 3),
        scales=_pack_sc6(sc6),
        d=d_bits,
    )


def _q3_fit(blocks: np.ndarray, s_real: np.ndarray):
    d_bits = fp32_to_fp16(np.abs(s_real).max() / 31.0)
    d = float(fp16_to_fp32(d_bits))
    if d > 0.0:
        sc6 = np.clip(_round_away(s_real / d) + 32, 0, 63).astype(np.int64)
    else:
        sc6 = np.full(N_BLOCKS, 32, dtype=np.int64)
    dl = d * (sc6 - 32)
    q_eff = np.zeros_like(blocks, dtype=np.int64)
    nz = dl != 0
    if nz.any():
        q_eff[nz] = np.clip(_round_away(blocks[nz] / dl[nz][:, None]), -4, 3).astype(np.int64)
    return d_bits, sc6, q_eff


def quantize_q8k(x) -> Q8KSuperBlock:
    """Quantize 256 finite values to a Q8_K superblock.

    d = binary16(amax/127); values round to round(x/d) clamped to
    [-127, 127]. All-zero input (or amax underflowing binary16) gives the
    all-zero superblock.
    """
    vec = _check_vec(x)
    amax = np.abs(vec).max()
    if amax == 0.0:
        return Q8KSuperBlock(d=0, qs=bytes(SB_LEN))
    d_bits = fp32_to_fp16(amax / 127.0)
    d = float(fp16_to_fp32(d_bits))
    if d == 0.0:
        return Q8KSuperBlock(d=0, qs=bytes(SB_LEN))
    q = np.clip(_round_away(vec / d), -127, 127).astype(np.int8)
    return Q8KSuperBlock(d=d_bits, qs=q.tobytes())


def dequantize_q2k(sb: Q2KSuperBlock) -> np.ndarray:
    """Decode to float32: (d*sc4)*q - (dmin*mn4), elementwise per block."""
    d = fp16_to_fp32(sb.d)
    dmin = fp16_to_fp32(sb.dmin)
    sc = np.frombuffer(sb.scales, dtype=np.uint8)
    dl = d * (sc & 0xF).astype(np.float32)
    ml = dmin * (sc >> 4).astype(np.float32)
    q = _unpack_q2(sb.qs).astype(np.float32)
    return dl[_BLOCK_OF] * q - ml[_BLOCK_OF]


def dequantize_q3k(sb: Q3KSuperBlock) -> np.ndarray:
    """Decode to float32: d*(sc6-32)*(q3-4), elementwise per block."""
    d = fp16_to_fp32(sb.d)
    dl = d * (_unpack_sc6(sb.scales) - 32).astype(np.float32)
    q3 = _unpack_q2(sb.qs) + 4 * _unpack_hmask(sb.hmask)
    return dl[_BLOCK_OF] * (q3 - 4).astype(np.float32)


def dequantize_q8k(sb: Q8KSuperBlock) -> np.ndarray:
    """Decode to float32: d*qs."""
    d = fp16_to_fp32(sb.d)
    return d * np.frombuffer(sb.qs, dtype=np.int8).astype(np.float32)


QUANTIZE = {
    Variant.Q2_K: quantize_q2k,
    Variant.Q3_K: quantize_q3k,
    Variant.Q8_K: quantize_q8k,
}

DEQUANTIZE = {
    Variant.Q2_K: dequantize_q2k,
    Variant.Q3_K: dequantize_q3k,
    Variant.Q8_K: dequantize_q8k,
}


def quantize_sb(w, variant: Variant) -> SuperBlock:
    return QUANTIZE[variant](w)


def dequantize_sb(sb: SuperBlock) -> np.ndarray:
    return DEQUANTIZE[variant_of(sb)](sb)


def serialize_sb(sb: SuperBlock) -> bytes:
    """Serialize one superblock to its pinned little-endian layout."""
    if isinstance(sb, Q2KSuperBlock):
        return sb.scales + sb.qs + struct.pack("<HH", sb.d, sb.dmin)
    if isinstance(sb, Q3KSuperBlock):
        return sb.hmask + sb.qs + sb.scales + struct.pack("<H", sb.d)
    if isinstance(sb, Q8KSuperBlock):
        return struct.pack("<H", sb.d) + sb.qs
    raise FormatError(f"not a superblock: {type(sb).__name__}")


def deserialize_sb(data: bytes, variant: Variant) -> SuperBlock:
    """Inverse of serialize_sb. Wrong byte count raises FormatError."""
    expect = SB_BYTES[variant]
    if len(data) != expect:
        raise FormatError(f"{variant.value} superblock needs {expect} bytes, got {len(data)}")
    if variant is Variant.Q2_K:
        d, dmin = struct.unpack_from("<HH", data, 80)
        return Q2KSuperBlock(scales=data[:16], qs=data[16:80], d=d, dmin=dmin)
    if variant is Variant.Q3_K:
        (d,) = struct.unpack_from("<H", data, 108)
        return Q3KSuperBlock(hmask=data[:32], qs=data[32:96], scales=data[96:108], d=d)
    (d,) = struct.unpack_from("<H", data, 0)
    return Q8KSuperBlock(d=d, qs=data[2:258])


@dataclass(frozen=True)
class QuantRow:
    """A quantized 1-D run of n*256 values: one variant, n superblocks."""

    variant: Variant
    blocks: tuple

    def __post_init__(self):
        cls = _SB_CLASS[self.variant]
        if not all(isinstance(b, cls) for b in self.blocks):
            raise FormatError(f"row blocks must all be {cls.__name__}")

    @property
    def length(self) -> int:
        return SB_LEN * len(self.blocks)


def quantize_row(w, variant: Variant) -> QuantRow:
    """Quantize a vector whose length is a multiple of 256, SB by SB."""
    arr = np.asarray(w, dtype=np.float64).reshape(-1)
    if arr.size == 0 or arr.size % SB_LEN:
        raise ShapeError(f"row length must be a positive multiple of {SB_LEN}, got {arr.size}")
    fn = QUANTIZE[variant]
    blocks = tuple(fn(arr[i:i + SB_LEN]) for i in range(0, arr.size, SB_LEN))
    return QuantRow(variant=variant, blocks=blocks)


def dequantize_row(row: QuantRow) -> np.ndarray:
    fn = DEQUANTIZE[row.variant]
    return np.concatenate([fn(b) for b in row.blocks])


def serialize_row(row: QuantRow) -> bytes:
    return b"".join(serialize_sb(b) for b in row.blocks)


def deserialize_row(data: bytes, variant: Variant) -> QuantRow:
    size = SB_BYTES[variant]
    if len(data) == 0 or len(data) % size:
        raise FormatError(f"row payload must be a positive multiple of {size} bytes, got {len(data)}")
    blocks = tuple(deserialize_sb(data[i:i + size], variant) for i in range(0, len(data), size))
    return QuantRow(variant=variant, blocks=blocks)
