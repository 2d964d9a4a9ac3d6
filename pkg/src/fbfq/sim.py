"""Functional and cycle-approximate model of the accelerator datapath.

Pipeline mirrored here: instruction decoder -> data loader (round-robins
superblocks across FIFOs) -> bit slicer -> superblock caches (w_scales /
w_low / w_high buffers per weight SB, d/qs/bsums per input SB) -> vector
compute unit with per-variant scalar scaling -> accumulator bank ->
output drain.

Functional semantics:
  * CONFIG sets the tile registers. It reallocates the accumulator bank
    only when (m_tile, n_tile) changes, so a mid-tile CONFIG that narrows
    k_sb for a K-split tail keeps the partial sums.
  * LOAD_WEIGHTS / LOAD_INPUT each replace their cache wholesale. Loads
    never touch the accumulator bank.
  * SCHEDULE computes cache-resident weights against cache-resident inputs
    and adds into the accumulator, superblock index ascending, using the
    exact float32 expression trees of the fused kernels. Results are
    therefore bit-identical to matmul_bfq and invariant to the FIFO count.
  * STORE_OUTPUT appends the accumulator (row-major) to the output queue
    and clears it to zeros.

Cycle model, first-order and deliberately simple: input streaming costs
ceil(words / words_in_per_cycle) per LOAD (opcode and count words
included), compute costs (1 + scalar_overhead) * ceil(16 / lanes) cycles
per 16-weight block per output element, the store drain costs
ceil(elements / words_out_per_cycle) per STORE_OUTPUT, and loads overlap
compute: total = max(loads, compute) + store. CONFIG/SCHEDULE words are
not charged. estimate_cycles is the closed-form twin and must agree with
the streamed counters exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import SB_BYTES, SB_LEN, Variant
from .driver import AccelCaps, LayerDims, TilePlan
from .errors import (
    CapacityFault,
    EmptyOutput,
    FormatError,
    PlanError,
    ProtocolFault,
)
from .fp16 import fp16_to_fp32
from .isa import ConfigPayload, Opcode, decode_instruction


@dataclass(frozen=True)
class SimConfig:
    """Datapath width and timing knobs."""

    n_fifos: int = 4
    lanes: int = 16
    words_in_per_cycle: int = 4
    words_out_per_cycle: int = 4
    clock_mhz: float = 200.0
    # charged per 16-weight block in units of one vector pass; at the
    # reference lanes=16 this is exactly 2 cycles per block
    scalar_overhead: int = 2

    def __post_init__(self):
        if self.lanes not in (1, 2, 4, 8, 16):
            raise FormatError(f"lanes must divide 16, got {self.lanes}")
        for name in ("n_fifos", "words_in_per_cycle", "words_out_per_cycle"):
            if getattr(self, name) < 1:
                raise FormatError(f"{name} must be at least 1")
        if self.clock_mhz <= 0:
            raise FormatError("clock_mhz must be positive")
        if self.scalar_overhead < 0:
            raise FormatError("scalar_overhead must be non-negative")

    @property
    def block_cycles(self) -> int:
        """Cycles to push one 16-weight block through the compute unit."""
        return (1 + self.scalar_overhead) * -(-16 // self.lanes)


@dataclass(frozen=True)
class CycleStats:
    """Per-run cycle counters plus the derived wall-clock figures."""

    cycles_load_w: int = 0
    cycles_load_x: int = 0
    cycles_compute: int = 0
    cycles_store: int = 0
    cycles_total: int = 0
    total_macs: int = 0
    clock_mhz: float = 200.0

    @property
    def seconds(self) -> float:
        return self.cycles_total / (self.clock_mhz * 1e6)

    @property
    def macs_per_cycle(self) -> float:
        return self.total_macs / self.cycles_total if self.cycles_total else 0.0

    FIELDS = (
        "cycles_load_w",
        "cycles_load_x",
        "cycles_compute",
        "cycles_store",
        "cycles_total",
        "total_macs",
        "clock_mhz",
        "seconds",
        "macs_per_cycle",
    )

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.FIELDS}

    def to_kv_text(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items())

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.FIELDS)

    def to_csv_row(self) -> str:
        return ",".join(str(v) for v in self.as_dict().values())


@dataclass
class WeightSBEntry:
    """Bit-sliced weight superblock as the DSBP buffers hold it."""

    variant: Variant
    d: np.float32
    dmin: np.float32          # zero for Q3_K
    w_scales: np.ndarray      # Q2_K: (16, 2) scale/min codes; Q3_K: (16,) 6-bit codes
    w_low: np.ndarray         # (256,) low 2 bits
    w_high: np.ndarray | None # Q3_K: (256,) high bits


@dataclass
class InputSBEntry:
    """Bit-sliced Q8_K input superblock."""

    d: np.float32
    qs: np.ndarray      # (256,) signed values
    bsums: np.ndarray   # (16,) per-block sums


def bit_slice_sb(raw: bytes, variant: Variant, kind: str):
    """Slice one serialized superblock into its cache buffers.

    kind is "weight" (Q2_K/Q3_K) or "input" (Q8_K). The unpacking here is
    written as reshape/shift ladders over the raw bytes, a different
    derivation from the codec's index-map unpacking, so equivalence tests
    between the two paths are meaningful.
    """
    if len(raw) != SB_BYTES[variant]:
        raise FormatError(
            f"{variant.value} superblock is {SB_BYTES[variant]} bytes, got {len(raw)}"
        )
    if kind == "weight":
        if variant is Variant.Q2_K:
            return _slice_q2k(raw)
        if variant is Variant.Q3_K:
            return _slice_q3k(raw)
        raise FormatError("weight superblocks must be Q2_K or Q3_K")
    if kind == "input":
        if variant is not Variant.Q8_K:
            raise FormatError("input superblocks must be Q8_K")
        return _slice_q8k(raw)
    raise FormatError(f"unknown slice kind {kind!r}")


def _slice_low2(qs64: np.ndarray) -> np.ndarray:
    # two 32-byte halves, four 2-bit levels per half, level-major order
    halves = qs64.reshape(2, 32)
    levels = np.stack([(halves >> (2 * lvl)) & 3 for lvl in range(4)], axis=1)
    return levels.reshape(SB_LEN)


def _slice_q2k(raw: bytes) -> WeightSBEntry:
    buf = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    scales = np.stack([buf[:16] & 0xF, buf[:16] >> 4], axis=1)
    low = _slice_low2(buf[16:80])
    d = fp16_to_fp32(int(buf[80]) | (int(buf[81]) << 8))
    dmin = fp16_to_fp32(int(buf[82]) | (int(buf[83]) << 8))
    return WeightSBEntry(Variant.Q2_K, d, dmin, scales, low, None)


def _slice_q3k(raw: bytes) -> WeightSBEntry:
    buf = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    hbits = np.unpackbits(
        np.frombuffer(raw[:32], dtype=np.uint8), bitorder="little"
    ).reshape(32, 8)
    high = hbits.T.reshape(SB_LEN).astype(np.int64)
    low = _slice_low2(buf[32:96])
    a, b, c = buf[96:100], buf[100:104], buf[104:108]
    sc6 = np.concatenate([
        (a & 15) | ((c & 3) << 4),
        (b & 15) | (((c >> 2) & 3) << 4),
        (a >> 4) | (((c >> 4) & 3) << 4),
        (b >> 4) | ((c >> 6) << 4),
    ])
    d = fp16_to_fp32(int(buf[108]) | (int(buf[109]) << 8))
    return WeightSBEntry(Variant.Q3_K, d, np.float32(0.0), sc6, low, high)


def _slice_q8k(raw: bytes) -> InputSBEntry:
    d = fp16_to_fp32(int(raw[0]) | (int(raw[1]) << 8))
    qs = np.frombuffer(raw, dtype=np.int8, offset=2).astype(np.int64)
    bsums = qs.reshape(16, 16).sum(axis=1)
    return InputSBEntry(d, qs, bsums)


def _vcu_dot(w: WeightSBEntry, x: InputSBEntry) -> np.float32:
    """Vector compute unit: exact integer MACs, then the pinned fp32 tree."""
    if w.variant is Variant.Q2_K:
        s_blocks = (w.w_low * x.qs).reshape(16, 16).sum(axis=1)
        s1 = int(np.dot(w.w_scales[:, 0], s_blocks))
        s2 = int(np.dot(w.w_scales[:, 1], x.bsums))
        return x.d * (w.d * np.float32(s1) - w.dmin * np.float32(s2))
    q_eff = w.w_low + 4 * w.w_high - 4
    s_blocks = (q_eff * x.qs).reshape(16, 16).sum(axis=1)
    total = int(np.dot(w.w_scales - 32, s_blocks))
    return (x.d * w.d) * np.float32(total)


class Simulator:
    """Single-threaded accelerator instance; callers synchronize externally."""

    def __init__(self, caps: AccelCaps | None = None, config: SimConfig | None = None):
        self.caps = caps if caps is not None else AccelCaps()
        self.config = config if config is not None else SimConfig()
        self._cfg: ConfigPayload | None = None
        self._weight_fifos = [[] for _ in range(self.config.n_fifos)]
        self._input_fifos = [[] for _ in range(self.config.n_fifos)]
        self._weight_cache: list[WeightSBEntry] = []
        self._input_cache: list[InputSBEntry] = []
        self._acc: np.ndarray | None = None
        self._out_queue: list[np.ndarray] = []
        self.status = "idle"
        self.clear_stats()

    # ------------------------------------------------------------- streaming

    def ingest(self, words) -> None:
        """Decode and execute an instruction stream."""
        pos = 0
        while pos < len(words):
            start = pos
            variant = self._cfg.weight_variant if self._cfg else None
            ins, pos = decode_instruction(words, pos, variant)
            self._execute(ins, pos - start)

    def _execute(self, ins, n_words: int) -> None:
        if ins.opcode is Opcode.CONFIG:
            self._on_config(ins.payload)
        elif ins.opcode is Opcode.LOAD_WEIGHTS:
            self._on_load(ins.payload, weights=True, n_words=n_words)
        elif ins.opcode is Opcode.LOAD_INPUT:
            self._on_load(ins.payload, weights=False, n_words=n_words)
        elif ins.opcode is Opcode.SCHEDULE:
            self._on_schedule()
        else:
            self._on_store()

    def _on_config(self, cfg: ConfigPayload) -> None:
        if cfg.m_tile * cfg.n_tile > self.caps.out_buf_elems:
            raise CapacityFault(
                f"accumulator bank of {self.caps.out_buf_elems} elements cannot hold "
                f"a {cfg.m_tile}x{cfg.n_tile} tile"
            )
        if self._acc is None or self._acc.shape != (cfg.m_tile, cfg.n_tile):
            self._acc = np.zeros((cfg.m_tile, cfg.n_tile), dtype=np.float32)
        self._cfg = cfg

    def _on_load(self, blob, weights: bool, n_words: int) -> None:
        cap = self.caps.weight_cache_sb if weights else self.caps.input_cache_sb
        if blob.count > cap:
            which = "weight" if weights else "input"
            raise CapacityFault(f"{blob.count} superblocks exceed the {cap}-SB {which} cache")
        size = SB_BYTES[blob.variant]
        fifos = self._weight_fifos if weights else self._input_fifos
        for lane in fifos:
            lane.clear()
        # data loader: consecutive superblocks round-robin across the FIFOs
        for idx in range(blob.count):
            fifos[idx % self.config.n_fifos].append(blob.data[idx * size:(idx + 1) * size])
        kind = "weight" if weights else "input"
        cache = [
            bit_slice_sb(fifos[idx % self.config.n_fifos].pop(0), blob.variant, kind)
            for idx in range(blob.count)
        ]
        if weights:
            self._weight_cache = cache
            self._c_load_w += -(-n_words // self.config.words_in_per_cycle)
        else:
            self._input_cache = cache
            self._c_load_x += -(-n_words // self.config.words_in_per_cycle)
        self.status = "loading"

    def _on_schedule(self) -> None:
        if self._cfg is None:
            raise ProtocolFault("SCHEDULE before any CONFIG")
        if not self._weight_cache or not self._input_cache:
            raise ProtocolFault("SCHEDULE with empty caches")
        want = self._cfg.weight_variant
        if any(e.variant is not want for e in self._weight_cache):
            raise ProtocolFault(
                f"weight cache holds a different format than CONFIG weight_type "
                f"{self._cfg.weight_type} ({want.value})"
            )
        cfg = self._cfg
        if len(self._weight_cache) != cfg.m_tile * cfg.k_sb:
            raise ProtocolFault(
                f"weight cache has {len(self._weight_cache)} SBs, "
                f"CONFIG implies {cfg.m_tile}x{cfg.k_sb}"
            )
        if len(self._input_cache) != cfg.n_tile * cfg.k_sb:
            raise ProtocolFault(
                f"input cache has {len(self._input_cache)} SBs, "
                f"CONFIG implies {cfg.n_tile}x{cfg.k_sb}"
            )
        self.status = "computing"
        self.dsbp_compute()

    def dsbp_compute(self) -> None:
        """One SCHEDULE round: all cache-resident MACs into the accumulator."""
        cfg = self._cfg
        k = cfg.k_sb
        for m in range(cfg.m_tile):
            wrow = self._weight_cache[m * k:(m + 1) * k]
            for n in range(cfg.n_tile):
                xcol = self._input_cache[n * k:(n + 1) * k]
                acc = self._acc[m, n]
                for sb in range(k):
                    acc = acc + _vcu_dot(wrow[sb], xcol[sb])
                self._acc[m, n] = acc
        blocks = cfg.m_tile * cfg.n_tile * k * 16
        self._c_compute += blocks * self.config.block_cycles
        self._macs += cfg.m_tile * cfg.n_tile * k * SB_LEN
        self.status = "idle"

    def _on_store(self) -> None:
        if self._cfg is None or self._acc is None:
            raise ProtocolFault("STORE_OUTPUT before any CONFIG")
        self._out_queue.append(self._acc.reshape(-1).copy())
        self._acc.fill(0.0)
        self._c_store += -(-self._acc.size // self.config.words_out_per_cycle)
        self.status = "draining"

    # --------------------------------------------------------------- results

    def read_output(self) -> np.ndarray:
        """Drain every queued tile, row-major in store order."""
        if not self._out_queue:
            raise EmptyOutput("output queue is empty")
        flat = np.concatenate(self._out_queue)
        self._out_queue.clear()
        self.status = "idle"
        return flat

    def cycle_report(self) -> CycleStats:
        loads = self._c_load_w + self._c_load_x
        return CycleStats(
            cycles_load_w=self._c_load_w,
            cycles_load_x=self._c_load_x,
            cycles_compute=self._c_compute,
            cycles_store=self._c_store,
            cycles_total=max(loads, self._c_compute) + self._c_store,
            total_macs=self._macs,
            clock_mhz=self.config.clock_mhz,
        )

    def clear_stats(self) -> None:
        """Zero the cycle counters. Functional state is untouched."""
        self._c_load_w = 0
        self._c_load_x = 0
        self._c_compute = 0
        self._c_store = 0
        self._macs = 0


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _load_words(count: int, sb_bytes: int) -> int:
    # opcode word + count word + zero-padded payload
    return 2 + _ceil_div(count * sb_bytes, 4)


def estimate_cycles(
    plan: TilePlan, dims: LayerDims, config: SimConfig, variant: Variant
) -> CycleStats:
    """Closed-form twin of the streamed cycle counters.

    Mirrors exactly the program build_program would emit for the plan, so
    for any driver-built run this equals Simulator.cycle_report(). An empty
    plan is zero work.
    """
    if not plan.tiles:
        return CycleStats(clock_mhz=config.clock_mhz)
    if variant not in (Variant.Q2_K, Variant.Q3_K):
        raise PlanError("weight variant must be Q2_K or Q3_K")
    if plan.k_sb != dims.k_sb:
        raise PlanError(f"plan k_sb {plan.k_sb} != dims k_sb {dims.k_sb}")
    cover = np.zeros((dims.m, dims.n), dtype=np.int32)
    for t in plan.tiles:
        if t.m0 + t.m_tile > dims.m or t.n0 + t.n_tile > dims.n or min(t.m_tile, t.n_tile) < 1:
            raise PlanError(f"tile {t} does not fit {dims.m}x{dims.n}")
        cover[t.m0:t.m0 + t.m_tile, t.n0:t.n0 + t.n_tile] += 1
    if not (cover == 1).all():
        raise PlanError("tiles do not partition the output exactly once")

    wb = SB_BYTES[variant]
    wipc = config.words_in_per_cycle
    lw = lx = compute = store = macs = 0
    if plan.fast_path:
        lx += _ceil_div(_load_words(dims.n * plan.k_sb, SB_BYTES[Variant.Q8_K]), wipc)
        for t in plan.tiles:
            lw += _ceil_div(_load_words(t.m_tile * plan.k_sb, wb), wipc)
            compute += t.m_tile * t.n_tile * plan.k_sb * 16 * config.block_cycles
            store += _ceil_div(t.m_tile * t.n_tile, config.words_out_per_cycle)
            macs += t.m_tile * t.n_tile * plan.k_sb * SB_LEN
    else:
        if plan.k_chunk < 1 or plan.k_chunk > plan.k_sb:
            raise PlanError(f"bad k_chunk {plan.k_chunk}")
        for t in plan.tiles:
            sb_left = plan.k_sb
            while sb_left > 0:
                clen = min(plan.k_chunk, sb_left)
                sb_left -= clen
                lx += _ceil_div(_load_words(t.n_tile * clen, SB_BYTES[Variant.Q8_K]), wipc)
                lw += _ceil_div(_load_words(t.m_tile * clen, wb), wipc)
                compute += t.m_tile * t.n_tile * clen * 16 * config.block_cycles
            store += _ceil_div(t.m_tile * t.n_tile, config.words_out_per_cycle)
            macs += t.m_tile * t.n_tile * plan.k_sb * SB_LEN

    return CycleStats(
        cycles_load_w=lw,
        cycles_load_x=lx,
        cycles_compute=compute,
        cycles_store=store,
        cycles_total=max(lw + lx, compute) + store,
        total_macs=macs,
        clock_mhz=config.clock_mhz,
    )
