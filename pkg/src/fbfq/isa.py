"""Micro-ISA for the accelerator: five opcodes on a 32-bit little-endian
word stream, plus the program builder and the .fbfq replay container.

Word formats (one opcode per word, high bytes zero):

    CONFIG        0x01 | weight_type | m_tile | n_tile | k_sb | flags(0)
    LOAD_WEIGHTS  0x02 | sb_count | <sb_count superblocks, zero-padded
                                     to a word boundary>
    LOAD_INPUT    0x04 | sb_count | <Q8_K superblocks, padded likewise>
    SCHEDULE      0x08
    STORE_OUTPUT  0x10

weight_type selects the weight superblock format: 0 = Q2_K, 1 = Q3_K. The
byte size of a LOAD_WEIGHTS payload therefore depends on the most recent
CONFIG, which is why decoding a lone LOAD_WEIGHTS needs the weight variant
passed in; parse_program tracks it across the stream. LOAD_INPUT payloads
are always Q8_K.

Blob order is pinned: LOAD_WEIGHTS carries the tile's rows outer, depth
(superblock index) inner; LOAD_INPUT carries the tile's columns outer,
depth inner.

Replay files (.fbfq) are: magic "FBFQ" | version word (1) | word count |
words, all little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import TYPE_CHECKING

from .codec import SB_BYTES, Variant, serialize_sb
from .errors import (
    BadMagic,
    FormatError,
    IllegalOpcode,
    PlanError,
    ProtocolFault,
    Truncated,
    UnsupportedVersion,
)

if TYPE_CHECKING:
    from .driver import TilePlan
    from .kernels import QuantMatrix


class Opcode(IntEnum):
    CONFIG = 0x01
    LOAD_WEIGHTS = 0x02
    LOAD_INPUT = 0x04
    SCHEDULE = 0x08
    STORE_OUTPUT = 0x10


_OPCODE_WORDS = {int(op) for op in Opcode}

WEIGHT_TYPE_OF = {Variant.Q2_K: 0, Variant.Q3_K: 1}
VARIANT_OF_WEIGHT_TYPE = {0: Variant.Q2_K, 1: Variant.Q3_K}

STREAM_MAGIC = b"FBFQ"
STREAM_VERSION = 1

_WORD_MAX = 0xFFFFFFFF


@dataclass(frozen=True)
class ConfigPayload:
    """Tile geometry and weight format for the SCHEDULE rounds that follow."""

    weight_type: int
    m_tile: int
    n_tile: int
    k_sb: int
    flags: int = 0

    def __post_init__(self):
        if self.weight_type not in (0, 1):
            raise FormatError(f"weight_type must be 0 or 1, got {self.weight_type}")
        for name in ("m_tile", "n_tile", "k_sb"):
            v = getattr(self, name)
            if not 1 <= v <= _WORD_MAX:
                raise FormatError(f"{name} must be a positive word, got {v}")
        if self.flags != 0:
            raise FormatError(f"flags is reserved and must be 0, got {self.flags}")

    @property
    def weight_variant(self) -> Variant:
        return VARIANT_OF_WEIGHT_TYPE[self.weight_type]


@dataclass(frozen=True)
class SBBlob:
    """A whole number of serialized superblocks riding a LOAD_* instruction."""

    variant: Variant
    data: bytes

    def __post_init__(self):
        size = SB_BYTES[self.variant]
        if len(self.data) % size:
            raise FormatError(
                f"blob of {len(self.data)} bytes is not whole {self.variant.value} superblocks"
            )

    @property
    def count(self) -> int:
        return len(self.data) // SB_BYTES[self.variant]


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    payload: ConfigPayload | SBBlob | None = None

    def __post_init__(self):
        if self.opcode is Opcode.CONFIG:
            ok = isinstance(self.payload, ConfigPayload)
        elif self.opcode in (Opcode.LOAD_WEIGHTS, Opcode.LOAD_INPUT):
            ok = isinstance(self.payload, SBBlob)
            if ok and self.opcode is Opcode.LOAD_INPUT and self.payload.variant is not Variant.Q8_K:
                raise FormatError("LOAD_INPUT blobs must be Q8_K")
            if ok and self.opcode is Opcode.LOAD_WEIGHTS and self.payload.variant is Variant.Q8_K:
                raise FormatError("LOAD_WEIGHTS blobs must be Q2_K or Q3_K")
        else:
            ok = self.payload is None
        if not ok:
            raise FormatError(f"bad payload for {self.opcode.name}")


def _bytes_to_words(data: bytes) -> list[int]:
    pad = (-len(data)) % 4
    padded = data + bytes(pad)
    return list(struct.unpack(f"<{len(padded) // 4}I", padded))


def _words_to_bytes(words) -> bytes:
    return struct.pack(f"<{len(words)}I", *words)


def encode_instruction(ins: Instruction) -> list[int]:
    """Encode one instruction to its word sequence."""
    op = int(ins.opcode)
    if ins.opcode is Opcode.CONFIG:
        p = ins.payload
        return [op, p.weight_type, p.m_tile, p.n_tile, p.k_sb, p.flags]
    if ins.opcode in (Opcode.LOAD_WEIGHTS, Opcode.LOAD_INPUT):
        return [op, ins.payload.count] + _bytes_to_words(ins.payload.data)
    return [op]


def decode_instruction(
    words, pos: int = 0, weight_variant: Variant | None = None
) -> tuple[Instruction, int]:
    """Decode the instruction starting at words[pos].

    Returns (instruction, position after it). weight_variant is the format
    established by the most recent CONFIG and is required to size a
    LOAD_WEIGHTS payload; decoding one without it raises ProtocolFault.
    """
    if pos >= len(words):
        raise Truncated(f"expected an opcode at word {pos}, stream has {len(words)}")
    word = int(words[pos])
    if word not in _OPCODE_WORDS:
        raise IllegalOpcode(pos, word)
    opcode = Opcode(word)

    if opcode is Opcode.CONFIG:
        if pos + 6 > len(words):
            raise Truncated(f"CONFIG at word {pos} is missing payload words")
        wt, m, n, k, flags = (int(w) for w in words[pos + 1:pos + 6])
        return Instruction(opcode, ConfigPayload(wt, m, n, k, flags)), pos + 6

    if opcode in (Opcode.LOAD_WEIGHTS, Opcode.LOAD_INPUT):
        if pos + 2 > len(words):
            raise Truncated(f"{opcode.name} at word {pos} is missing its count word")
        count = int(words[pos + 1])
        if opcode is Opcode.LOAD_INPUT:
            variant = Variant.Q8_K
        else:
            if weight_variant is None:
                raise ProtocolFault(
                    f"LOAD_WEIGHTS at word {pos} with no preceding CONFIG to size it"
                )
            variant = weight_variant
        nbytes = count * SB_BYTES[variant]
        nwords = (nbytes + 3) // 4
        if pos + 2 + nwords > len(words):
            raise Truncated(
                f"{opcode.name} at word {pos} needs {nwords} data words, "
                f"stream has {len(words) - pos - 2}"
            )
        data = _words_to_bytes(words[pos + 2:pos + 2 + nwords])[:nbytes]
        return Instruction(opcode, SBBlob(variant, data)), pos + 2 + nwords

    return Instruction(opcode), pos + 1


def encode_program(instructions) -> list[int]:
    words: list[int] = []
    for ins in instructions:
        words.extend(encode_instruction(ins))
    return words


def parse_program(words) -> list[Instruction]:
    """Decode a whole stream; every word must belong to an instruction."""
    out: list[Instruction] = []
    pos = 0
    weight_variant: Variant | None = None
    while pos < len(words):
        ins, pos = decode_instruction(words, pos, weight_variant)
        if ins.opcode is Opcode.CONFIG:
            weight_variant = ins.payload.weight_variant
        out.append(ins)
    return out


def _k_chunks(k_sb: int, k_chunk: int):
    for start in range(0, k_sb, k_chunk):
        yield start, min(k_chunk, k_sb - start)


def build_program(plan: "TilePlan", w: "QuantMatrix", xq: "QuantMatrix") -> list[int]:
    """Emit the word stream computing xq against w under the given plan.

    CONFIG leads, and is re-emitted only when the (weight_type, m_tile,
    n_tile, k_sb) tuple changes. Per tile the input blob loads before the
    weight blob. On the fast path the whole quantized input is loaded once
    up front and every tile spans all N columns; otherwise each tile
    streams its own input columns, K split into k_chunk-superblock rounds
    with STORE_OUTPUT only after the last round.
    """
    from .driver import validate_plan  # deferred to avoid a module cycle

    validate_plan(plan, w, xq)
    wtype = WEIGHT_TYPE_OF[w.variant]
    n_total = xq.n_rows

    instructions: list[Instruction] = []
    last_cfg: ConfigPayload | None = None

    def config(m_tile: int, n_tile: int, k_len: int):
        nonlocal last_cfg
        cfg = ConfigPayload(wtype, m_tile, n_tile, k_len)
        if cfg != last_cfg:
            instructions.append(Instruction(Opcode.CONFIG, cfg))
            last_cfg = cfg

    def load(opcode: Opcode, qm: "QuantMatrix", lanes: range, sb0: int, sb_len: int):
        data = b"".join(
            serialize_sb(qm.rows[i].blocks[sb])
            for i in lanes
            for sb in range(sb0, sb0 + sb_len)
        )
        instructions.append(Instruction(opcode, SBBlob(qm.variant, data)))

    if plan.fast_path:
        first = plan.tiles[0]
        config(first.m_tile, n_total, plan.k_sb)
        load(Opcode.LOAD_INPUT, xq, range(n_total), 0, plan.k_sb)
        for tile in plan.tiles:
            config(tile.m_tile, n_total, plan.k_sb)
            load(Opcode.LOAD_WEIGHTS, w, range(tile.m0, tile.m0 + tile.m_tile), 0, plan.k_sb)
            instructions.append(Instruction(Opcode.SCHEDULE))
            instructions.append(Instruction(Opcode.STORE_OUTPUT))
    else:
        for tile in plan.tiles:
            for sb0, sb_len in _k_chunks(plan.k_sb, plan.k_chunk):
                config(tile.m_tile, tile.n_tile, sb_len)
                load(Opcode.LOAD_INPUT, xq, range(tile.n0, tile.n0 + tile.n_tile), sb0, sb_len)
                load(Opcode.LOAD_WEIGHTS, w, range(tile.m0, tile.m0 + tile.m_tile), sb0, sb_len)
                instructions.append(Instruction(Opcode.SCHEDULE))
            instructions.append(Instruction(Opcode.STORE_OUTPUT))
    return encode_program(instructions)


def write_stream(words, path) -> None:
    """Write a .fbfq replay file."""
    with open(path, "wb") as f:
        f.write(STREAM_MAGIC)
        f.write(struct.pack("<II", STREAM_VERSION, len(words)))
        f.write(_words_to_bytes(words))


def read_stream(path) -> list[int]:
    """Read a .fbfq replay file back to its word list."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise Truncated(f"replay file holds {len(blob)} bytes, header needs 12")
    if blob[:4] != STREAM_MAGIC:
        raise BadMagic(f"bad replay magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != STREAM_VERSION:
        raise UnsupportedVersion(f"unsupported replay version {version}")
    if len(blob) != 12 + 4 * count:
        raise Truncated(f"replay file declares {count} words, payload is {len(blob) - 12} bytes")
    return list(struct.unpack_from(f"<{count}I", blob, 12))
