"""Matrix kernels: float32 reference matmul, fused quantized dot products,
and the quantized matmul they compose into.

Numeric contract. The fused kernels never materialize dequantized weights:
all code-by-code multiply-accumulates happen in exact integer arithmetic
(every intermediate fits comfortably in 32 bits) and float32 enters only
through the pinned expression trees

    Q2_K * Q8_K:  x.d * (w.d * S1 - w.dmin * S2)
                  S1 = sum_j sc4(j) * sum_i q2(i) * xq(i)
                  S2 = sum_j mn4(j) * bsums(j)
    Q3_K * Q8_K:  (x.d * w.d) * sum_j (sc6(j)-32) * sum_i (q3(i)-4) * xq(i)

with the integer totals converted to float32 exactly (they stay below 2**24).
matmul_bfq accumulates superblock partials in float32 in ascending
superblock order. The simulator's vector unit reproduces these trees from
its own sliced buffers, which is what makes bit-identical cross-checks
between the two meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import (
    SB_LEN,
    N_BLOCKS,
    BLOCK_LEN,
    Q2KSuperBlock,
    Q3KSuperBlock,
    Q8KSuperBlock,
    QuantRow,
    Variant,
    _BLOCK_OF,
    _unpack_hmask,
    _unpack_q2,
    _unpack_sc6,
    dequantize_row,
    quantize_row,
)
from .errors import ShapeError
from .fp16 import fp16_to_fp32


@dataclass(frozen=True)
class QuantMatrix:
    """Row-major quantized matrix: every row is one QuantRow of row_len values."""

    variant: Variant
    rows: tuple
    row_len: int

    def __post_init__(self):
        for r in self.rows:
            if not isinstance(r, QuantRow) or r.variant is not self.variant:
                raise ShapeError("matrix rows must share the matrix variant")
            if r.length != self.row_len:
                raise ShapeError(
                    f"ragged quantized matrix: row of {r.length}, expected {self.row_len}"
                )

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def k_sb(self) -> int:
        return self.row_len // SB_LEN


def quantize_matrix(a: np.ndarray, variant: Variant) -> QuantMatrix:
    """Quantize each row of a 2-D array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 2-D array, got shape {arr.shape}")
    rows = tuple(quantize_row(arr[i], variant) for i in range(arr.shape[0]))
    return QuantMatrix(variant=variant, rows=rows, row_len=arr.shape[1])


def dequantize_matrix(qm: QuantMatrix) -> np.ndarray:
    return np.stack([dequantize_row(r) for r in qm.rows])


def quantize_input(x: np.ndarray) -> QuantMatrix:
    """Quantize an activation matrix (K x N) column by column to Q8_K.

    Row n of the result is column n of x, split into K/256 superblocks.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a non-empty 2-D array, got shape {arr.shape}")
    rows = tuple(
        quantize_row(np.ascontiguousarray(arr[:, n]), Variant.Q8_K)
        for n in range(arr.shape[1])
    )
    return QuantMatrix(variant=Variant.Q8_K, rows=rows, row_len=arr.shape[0])


def matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference float32 matmul with strict left-to-right accumulation over k."""
    am = np.asarray(a, dtype=np.float32)
    bm = np.asarray(b, dtype=np.float32)
    if am.ndim != 2 or bm.ndim != 2:
        raise ShapeError("matmul_f32 needs two 2-D operands")
    if am.shape[1] != bm.shape[0]:
        raise ShapeError(f"inner dimensions differ: {am.shape} @ {bm.shape}")
    c = np.zeros((am.shape[0], bm.shape[1]), dtype=np.float32)
    for k in range(am.shape[1]):
        c += am[:, k:k + 1] * bm[k:k + 1, :]
    return c


# Pre-sliced integer views of superblocks. Unpacking is hoisted out of the
# inner loops of matmul_bfq; the public vec_dot functions build these per
# call so their results are the same code path either way.

def _pre_q2(w: Q2KSuperBlock):
    sc = np.frombuffer(w.scales, dtype=np.uint8)
    return (
        fp16_to_fp32(w.d),
        fp16_to_fp32(w.dmin),
        (sc & 0xF).astype(np.int64),
        (sc >> 4).astype(np.int64),
        _unpack_q2(w.qs),
    )


def _pre_q3(w: Q3KSuperBlock):
    return (
        fp16_to_fp32(w.d),
        _unpack_sc6(w.scales) - 32,
        _unpack_q2(w.qs) + 4 * _unpack_hmask(w.hmask) - 4,
    )


def _pre_q8(x: Q8KSuperBlock):
    return (
        fp16_to_fp32(x.d),
        np.frombuffer(x.qs, dtype=np.int8).astype(np.int64),
        np.asarray(x.bsums, dtype=np.int64),
    )


def _dot_q2(pw, px) -> np.float32:
    wd, wdmin, sc4, mn4, q2 = pw
    xd, xq, bsums = px
    s_blocks = (q2 * xq).reshape(N_BLOCKS, BLOCK_LEN).sum(axis=1)
    s1 = int(sc4 @ s_blocks)
    s2 = int(mn4 @ bsums)
    return xd * (wd * np.float32(s1) - wdmin * np.float32(s2))


def _dot_q3(pw, px) -> np.float32:
    wd, sc_eff, qe = pw
    xd, xq, _ = px
    s_blocks = (qe * xq).reshape(N_BLOCKS, BLOCK_LEN).sum(axis=1)
    total = int(sc_eff @ s_blocks)
    return (xd * wd) * np.float32(total)


def vec_dot_q2k_q8k(w: Q2KSuperBlock, x: Q8KSuperBlock) -> np.float32:
    """Fused 256-element dot product of a Q2_K and a Q8_K superblock."""
    return _dot_q2(_pre_q2(w), _pre_q8(x))


def vec_dot_q3k_q8k(w: Q3KSuperBlock, x: Q8KSuperBlock) -> np.float32:
    """Fused 256-element dot product of a Q3_K and a Q8_K superblock."""
    return _dot_q3(_pre_q3(w), _pre_q8(x))


def matmul_bfq(w: QuantMatrix, x: np.ndarray) -> np.ndarray:
    """Quantized matmul: (M x K quantized weights) @ (K x N float input).

    The input is quantized per column to Q8_K, then every output element is
    a sum of fused superblock dots, accumulated in float32 in ascending
    superblock order.
    """
    xm = np.asarray(x, dtype=np.float32)
    if xm.ndim != 2:
        raise ShapeError("input must be 2-D")
    if xm.shape[0] != w.row_len:
        raise ShapeError(f"K mismatch: weights {w.row_len}, input {xm.shape[0]}")
    return _matmul_quantized(w, quantize_input(xm))


def _matmul_quantized(w: QuantMatrix, xq: QuantMatrix) -> np.ndarray:
    if w.variant is Variant.Q2_K:
        pre_w, dot = _pre_q2, _dot_q2
    elif w.variant is Variant.Q3_K:
        pre_w, dot = _pre_q3, _dot_q3
    else:
        raise ShapeError("weights must be Q2_K or Q3_K")
    if xq.variant is not Variant.Q8_K:
        raise ShapeError("quantized input must be Q8_K")
    if xq.row_len != w.row_len:
        raise ShapeError(f"K mismatch: weights {w.row_len}, input {xq.row_len}")

    wp = [[pre_w(sb) for sb in row.blocks] for row in w.rows]
    xp = [[_pre_q8(sb) for sb in col.blocks] for col in xq.rows]
    k_sb = w.k_sb
    c = np.zeros((w.n_rows, xq.n_rows), dtype=np.float32)
    for m, wrow in enumerate(wp):
        for n, xcol in enumerate(xp):
            acc = np.float32(0.0)
            for sb in range(k_sb):
                acc = acc + dot(wrow[sb], xcol[sb])
            c[m, n] = acc
    return c


def dequant_matmul_oracle(w: QuantMatrix, xq: QuantMatrix) -> np.ndarray:
    """Reference path: dequantize both operands, then matmul_f32.

    Differences against matmul_bfq reflect accumulation order and fused
    scaling only, never input quantization, because both consume the same
    quantized input.
    """
    if xq.variant is not Variant.Q8_K:
        raise ShapeError("quantized input must be Q8_K")
    if xq.row_len != w.row_len:
        raise ShapeError(f"K mismatch: weights {w.row_len}, input {xq.row_len}")
    w_deq = dequantize_matrix(w)
    x_deq = dequantize_matrix(xq).T
    return matmul_f32(w_deq, x_deq)
