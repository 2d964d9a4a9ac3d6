"""Host-side driver: output-stationary tiling against the accelerator
capacities, program construction, and result reassembly.

Planning is deterministic. The tile shape preference is n_tile first (input
columns are the expensive reload), then m_tile, then the K chunk length:

    fast path (whole quantized input resident, whole weight rows stream):
        requires k_sb*N <= input_cache_sb, k_sb <= weight_cache_sb and
        out_buf_elems >= N. Then n_tile = N, the input loads once, and K is
        never split.
    chunked path: n_tile = min(N, input_cache_sb, out_buf_elems),
        m_tile = min(M, out_buf_elems//n_tile, weight_cache_sb),
        k_chunk = min(k_sb, weight_cache_sb//m_tile, input_cache_sb//n_tile).
        Each tile runs ceil(k_sb/k_chunk) load+SCHEDULE rounds with the
        accumulator carrying partials, then one STORE_OUTPUT.

Tiles cover the output grid in row-major order with clipped edge tiles, so
every output element belongs to exactly one tile.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .codec import SB_LEN, Variant
from .errors import CapacityError, PlanError, ShapeError
from .isa import build_program, write_stream
from .kernels import QuantMatrix, quantize_input


@dataclass(frozen=True)
class LayerDims:
    """Problem size: C[m, n] = W[m, k] @ X[k, n], k a multiple of 256."""

    m: int
    k: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1 or self.k < 1:
            raise ShapeError(f"dimensions must be positive, got {self}")
        if self.k % SB_LEN:
            raise ShapeError(f"k must be a multiple of {SB_LEN}, got {self.k}")

    @property
    def k_sb(self) -> int:
        return self.k // SB_LEN


@dataclass(frozen=True)
class AccelCaps:
    """Hardware capacities: superblock cache sizes, FIFO count, and the
    accumulator bank size in float32 elements."""

    weight_cache_sb: int = 8
    input_cache_sb: int = 64
    n_fifos: int = 4
    out_buf_elems: int = 1024

    def __post_init__(self):
        for name in ("weight_cache_sb", "input_cache_sb", "n_fifos", "out_buf_elems"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be at least 1")


class Tile(NamedTuple):
    m0: int
    n0: int
    m_tile: int
    n_tile: int


@dataclass(frozen=True)
class TilePlan:
    """The driver's schedule: output tiles in issue order plus K handling."""

    tiles: tuple
    k_sb: int
    fast_path: bool
    k_chunk: int


def plan_tiles(dims: LayerDims, caps: AccelCaps) -> TilePlan:
    """Partition the output grid under the capacity constraints."""
    k_sb = dims.k_sb
    fast = (
        k_sb * dims.n <= caps.input_cache_sb
        and k_sb <= caps.weight_cache_sb
        and caps.out_buf_elems >= dims.n
    )
    if fast:
        n_tile = dims.n
        m_tile = min(dims.m, caps.out_buf_elems // n_tile, caps.weight_cache_sb // k_sb)
        k_chunk = k_sb
    else:
        n_tile = min(dims.n, caps.input_cache_sb, caps.out_buf_elems)
        m_tile = min(dims.m, caps.out_buf_elems // n_tile, caps.weight_cache_sb)
        k_chunk = min(k_sb, caps.weight_cache_sb // m_tile, caps.input_cache_sb // n_tile)
    if m_tile < 1 or n_tile < 1 or k_chunk < 1:
        # cannot happen for validated caps; kept as a hard stop
        raise CapacityError(f"no legal tile for {dims} under {caps}")

    tiles = tuple(
        Tile(m0, n0, min(m_tile, dims.m - m0), min(n_tile, dims.n - n0))
        for m0 in range(0, dims.m, m_tile)
        for n0 in range(0, dims.n, n_tile)
    )
    return TilePlan(tiles=tiles, k_sb=k_sb, fast_path=fast, k_chunk=k_chunk)


def validate_plan(plan: TilePlan, w: QuantMatrix, xq: QuantMatrix) -> LayerDims:
    """Check a plan against its operands; raises PlanError on any mismatch."""
    if w.variant not in (Variant.Q2_K, Variant.Q3_K):
        raise PlanError("weights must be Q2_K or Q3_K")
    if xq.variant is not Variant.Q8_K:
        raise PlanError("quantized input must be Q8_K")
    if w.row_len != xq.row_len:
        raise PlanError(f"K mismatch: weights {w.row_len}, input {xq.row_len}")
    dims = LayerDims(m=w.n_rows, k=w.row_len, n=xq.n_rows)
    if plan.k_sb != dims.k_sb:
        raise PlanError(f"plan k_sb {plan.k_sb} != operand k_sb {dims.k_sb}")
    if plan.k_chunk < 1 or (not plan.fast_path and plan.k_chunk > plan.k_sb):
        raise PlanError(f"bad k_chunk {plan.k_chunk}")
    cover = np.zeros((dims.m, dims.n), dtype=np.int32)
    for t in plan.tiles:
        if t.m_tile < 1 or t.n_tile < 1:
            raise PlanError(f"degenerate tile {t}")
        if t.m0 + t.m_tile > dims.m or t.n0 + t.n_tile > dims.n:
            raise PlanError(f"tile {t} exceeds the {dims.m}x{dims.n} output")
        if plan.fast_path and (t.n0 != 0 or t.n_tile != dims.n):
            raise PlanError(f"fast-path tile {t} does not span all columns")
        cover[t.m0:t.m0 + t.m_tile, t.n0:t.n0 + t.n_tile] += 1
    if not (cover == 1).all():
        raise PlanError("tiles do not partition the output exactly once")
    return dims


class Driver:
    """One driver instance owns one simulator handle and is not reentrant."""

    def __init__(self, sim):
        self.sim = sim

    def run_matmul(self, w: QuantMatrix, x: np.ndarray, record_path=None) -> np.ndarray:
        """Quantize the input, plan, stream the program, reassemble the output.

        The simulator keeps its functional state across runs; only its cycle
        counters are cleared so the per-run report is well defined.
        """
        xm = np.asarray(x, dtype=np.float32)
        if xm.ndim != 2:
            raise ShapeError("input must be 2-D")
        if xm.shape[0] != w.row_len:
            raise ShapeError(f"K mismatch: weights {w.row_len}, input {xm.shape[0]}")
        dims = LayerDims(m=w.n_rows, k=w.row_len, n=xm.shape[1])
        plan = plan_tiles(dims, self.sim.caps)
        xq = quantize_input(xm)
        words = build_program(plan, w, xq)
        if record_path is not None:
            write_stream(words, record_path)
        self.sim.clear_stats()
        self.sim.ingest(words)
        flat = self.sim.read_output()
        return assemble_output(plan, dims, flat)

    def last_plan_for(self, w: QuantMatrix, n: int) -> TilePlan:
        dims = LayerDims(m=w.n_rows, k=w.row_len, n=n)
        return plan_tiles(dims, self.sim.caps)


def assemble_output(plan: TilePlan, dims: LayerDims, flat: np.ndarray) -> np.ndarray:
    """Scatter the drained per-tile row-major outputs back to C[m, n]."""
    total = sum(t.m_tile * t.n_tile for t in plan.tiles)
    if flat.size != total:
        raise ShapeError(f"drained {flat.size} values, plan produces {total}")
    c = np.zeros((dims.m, dims.n), dtype=np.float32)
    pos = 0
    for t in plan.tiles:
        n_elems = t.m_tile * t.n_tile
        c[t.m0:t.m0 + t.m_tile, t.n0:t.n0 + t.n_tile] = (
            flat[pos:pos + n_elems].reshape(t.m_tile, t.n_tile)
        )
        pos += n_elems
    return c


def run_matmul(w: QuantMatrix, x: np.ndarray, sim) -> np.ndarray:
    """Convenience wrapper around a one-shot Driver."""
    return Driver(sim).run_matmul(w, x)
