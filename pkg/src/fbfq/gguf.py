"""Minimal GGUF container reader/writer.

Covers what the toolkit needs from the public GGUF layout: enumerate
tensors, pull Q2_K/Q3_K tensor data into QuantMatrix form, and build the
per-type element histogram. Little-endian files only, container versions
2 and 3 (identical for little-endian payloads). Metadata values are kept
verbatim with their wire type; only "general.alignment" is interpreted.

Not covered on purpose: metadata schema validation, tokenizer payloads,
mmap loading, and writing full quantized models.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod

from .codec import SB_BYTES, SB_LEN, QuantRow, Variant, deserialize_sb
from .errors import (
    BadMagic,
    FormatError,
    ShapeError,
    Truncated,
    UnsupportedType,
    UnsupportedVersion,
)
from .kernels import QuantMatrix

MAGIC = b"GGUF"
DEFAULT_ALIGNMENT = 32

# public ggml enumeration; runtime byte-length checks below guard against drift
T_F32 = 0
T_F16 = 1
T_Q2_K = 10
T_Q3_K = 11
T_Q8_K = 15

TYPE_NAMES = {
    0: "F32", 1: "F16", 2: "Q4_0", 3: "Q4_1", 6: "Q5_0", 7: "Q5_1",
    8: "Q8_0", 9: "Q8_1", 10: "Q2_K", 11: "Q3_K", 12: "Q4_K", 13: "Q5_K",
    14: "Q6_K", 15: "Q8_K", 16: "IQ2_XXS", 17: "IQ2_XS", 18: "IQ3_XXS",
    24: "I8", 25: "I16", 26: "I32", 27: "I64", 28: "F64", 30: "BF16",
}

VARIANT_OF_TYPE = {T_Q2_K: Variant.Q2_K, T_Q3_K: Variant.Q3_K}

# metadata wire types: id -> (struct code, size); strings/arrays are special
_SCALAR_FMT = {
    0: ("<B", 1), 1: ("<b", 1), 2: ("<H", 2), 3: ("<h", 2),
    4: ("<I", 4), 5: ("<i", 4), 6: ("<f", 4), 7: ("<B", 1),
    10: ("<Q", 8), 11: ("<q", 8), 12: ("<d", 8),
}
_T_STRING = 8
_T_ARRAY = 9


@dataclass(frozen=True)
class MetaValue:
    """One metadata value with its wire type preserved.

    For arrays, value is a tuple and elem_type is the element wire type;
    nested arrays are not supported.
    """

    type_id: int
    value: object
    elem_type: int | None = None

    def __post_init__(self):
        if self.type_id == _T_ARRAY:
            if self.elem_type is None or self.elem_type in (_T_ARRAY,):
                raise FormatError("arrays need a scalar or string element type")
        elif self.type_id not in _SCALAR_FMT and self.type_id != _T_STRING:
            raise FormatError(f"unknown metadata type {self.type_id}")


@dataclass(frozen=True)
class TensorInfo:
    """One tensor descriptor; dims are stored innermost-first."""

    name: str
    dims: tuple
    type_id: int
    offset: int         # relative to the aligned data-section base
    file_offset: int    # absolute position of the tensor payload

    @property
    def n_elems(self) -> int:
        return prod(self.dims)

    @property
    def type_name(self) -> str:
        return TYPE_NAMES.get(self.type_id, f"type{self.type_id}")


@dataclass(frozen=True)
class TypeCount:
    type_id: int
    type_name: str
    n_tensors: int
    n_elems: int
    pct: float


@dataclass(frozen=True)
class TypeHistogram:
    """Per-type tensor/element counts, ascending type id."""

    rows: tuple

    @property
    def total_elems(self) -> int:
        return sum(r.n_elems for r in self.rows)

    def count_for(self, type_id: int) -> TypeCount | None:
        for r in self.rows:
            if r.type_id == type_id:
                return r
        return None


class _Cursor:
    """Sequential reader over an open binary file with hard EOF errors."""

    def __init__(self, fh):
        self.fh = fh

    def take(self, n: int) -> bytes:
        buf = self.fh.read(n)
        if len(buf) != n:
            raise Truncated(f"wanted {n} bytes, file ended after {len(buf)}")
        return buf

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        n = self.u64()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"metadata string is not UTF-8: {e}") from e

    def scalar(self, type_id: int):
        fmt, size = _SCALAR_FMT[type_id]
        v = struct.unpack(fmt, self.take(size))[0]
        return bool(v) if type_id == 7 else v

    def value(self, type_id: int) -> MetaValue:
        if type_id in _SCALAR_FMT:
            return MetaValue(type_id, self.scalar(type_id))
        if type_id == _T_STRING:
            return MetaValue(type_id, self.string())
        if type_id == _T_ARRAY:
            elem = self.u32()
            count = self.u64()
            if elem == _T_STRING:
                items = tuple(self.string() for _ in range(count))
            elif elem in _SCALAR_FMT:
                items = tuple(self.scalar(elem) for _ in range(count))
            else:
                raise FormatError(f"unsupported array element type {elem}")
            return MetaValue(_T_ARRAY, items, elem_type=elem)
        raise FormatError(f"unknown metadata type {type_id}")


def _align_up(x: int, a: int) -> int:
    return (x + a - 1) // a * a


def _alignment_of(metadata: dict) -> int:
    mv = metadata.get("general.alignment")
    if mv is None:
        return DEFAULT_ALIGNMENT
    a = int(mv.value)
    if a < 1:
        raise FormatError(f"general.alignment must be positive, got {a}")
    return a


def read_container(path) -> tuple:
    """Parse a GGUF file: (metadata dict, list of TensorInfo).

    Metadata values come back as MetaValue with wire types intact. Tensor
    file_offset fields are absolute and validated against the file size.
    """
    with open(path, "rb") as fh:
        cur = _Cursor(fh)
        if cur.take(4) != MAGIC:
            raise BadMagic("not a GGUF file")
        version = cur.u32()
        if version not in (2, 3):
            raise UnsupportedVersion(f"GGUF version {version}; this reader handles 2 and 3")
        n_tensors = cur.u64()
        n_kv = cur.u64()
        metadata: dict = {}
        for _ in range(n_kv):
            key = cur.string()
            metadata[key] = cur.value(cur.u32())
        alignment = _alignment_of(metadata)
        infos = []
        for _ in range(n_tensors):
            name = cur.string()
            n_dims = cur.u32()
            dims = tuple(cur.u64() for _ in range(n_dims))
            type_id = cur.u32()
            offset = cur.u64()
            if offset % alignment:
                raise FormatError(
                    f"tensor {name!r} offset {offset} not aligned to {alignment}"
                )
            infos.append((name, dims, type_id, offset))
        base = _align_up(fh.tell(), alignment)
        fh.seek(0, 2)
        file_size = fh.tell()
    tensors = [
        TensorInfo(name, dims, type_id, offset, base + offset)
        for name, dims, type_id, offset in infos
    ]
    for t in tensors:
        if t.file_offset > file_size:
            raise Truncated(f"tensor {t.name!r} starts past end of file")
    return metadata, tensors


def load_quant_tensor(path, info: TensorInfo) -> QuantMatrix:
    """Read one Q2_K/Q3_K tensor as a QuantMatrix.

    GGUF dims are innermost-first, so dims[0] is the row length and the
    outer extents multiply into the row count.
    """
    variant = VARIANT_OF_TYPE.get(info.type_id)
    if variant is None:
        raise UnsupportedType(
            f"tensor {info.name!r} has type {info.type_name}; only Q2_K/Q3_K load"
        )
    if not info.dims:
        raise ShapeError(f"tensor {info.name!r} has no dims")
    row_len = info.dims[0]
    n_rows = prod(info.dims[1:]) if len(info.dims) > 1 else 1
    if row_len % SB_LEN:
        raise ShapeError(
            f"tensor {info.name!r} innermost extent {row_len} is not a multiple of {SB_LEN}"
        )
    sb_per_row = row_len // SB_LEN
    sb_bytes = SB_BYTES[variant]
    # byte-length check pins the type-id mapping without trusting the constant
    n_bytes = n_rows * sb_per_row * sb_bytes
    with open(path, "rb") as fh:
        fh.seek(info.file_offset)
        raw = fh.read(n_bytes)
    if len(raw) != n_bytes:
        raise Truncated(
            f"tensor {info.name!r}: wanted {n_bytes} payload bytes, got {len(raw)}"
        )
    rows = []
    pos = 0
    for _ in range(n_rows):
        blocks = []
        for _ in range(sb_per_row):
            blocks.append(deserialize_sb(raw[pos:pos + sb_bytes], variant))
            pos += sb_bytes
        rows.append(QuantRow(variant=variant, blocks=tuple(blocks)))
    return QuantMatrix(variant=variant, rows=tuple(rows), row_len=row_len)


def type_histogram(path) -> TypeHistogram:
    """Element-count histogram over every tensor in the file."""
    _, tensors = read_container(path)
    counts: dict = {}
    for t in tensors:
        n_t, n_e = counts.get(t.type_id, (0, 0))
        counts[t.type_id] = (n_t + 1, n_e + t.n_elems)
    total = sum(e for _, e in counts.values())
    rows = tuple(
        TypeCount(
            type_id=tid,
            type_name=TYPE_NAMES.get(tid, f"type{tid}"),
            n_tensors=n_t,
            n_elems=n_e,
            pct=100.0 * n_e / total if total else 0.0,
        )
        for tid, (n_t, n_e) in sorted(counts.items())
    )
    return TypeHistogram(rows=rows)


@dataclass(frozen=True)
class TensorSpec:
    """Writer-side tensor: dims innermost-first, payload already serialized."""

    name: str
    dims: tuple
    type_id: int
    data: bytes


def _encode_value(mv: MetaValue) -> bytes:
    if mv.type_id in _SCALAR_FMT:
        fmt, _ = _SCALAR_FMT[mv.type_id]
        v = int(mv.value) if mv.type_id == 7 else mv.value
        return struct.pack(fmt, v)
    if mv.type_id == _T_STRING:
        raw = str(mv.value).encode("utf-8")
        return struct.pack("<Q", len(raw)) + raw
    out = [struct.pack("<IQ", mv.elem_type, len(mv.value))]
    for item in mv.value:
        if mv.elem_type == _T_STRING:
            raw = str(item).encode("utf-8")
            out.append(struct.pack("<Q", len(raw)) + raw)
        else:
            fmt, _ = _SCALAR_FMT[mv.elem_type]
            out.append(struct.pack(fmt, int(item) if mv.elem_type == 7 else item))
    return b"".join(out)


def _encode_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def write_container(path, metadata: dict, tensors, version: int = 3) -> None:
    """Write a GGUF file read_container parses back identically.

    Tensor payloads are laid out in list order, each padded to the file
    alignment ("general.alignment" metadata if present, else 32).
    """
    if version not in (2, 3):
        raise UnsupportedVersion(f"writer emits GGUF 2 or 3, not {version}")
    alignment = _alignment_of(metadata)
    head = [MAGIC, struct.pack("<IQQ", version, len(tensors), len(metadata))]
    for key, mv in metadata.items():
        head.append(_encode_string(key))
        head.append(struct.pack("<I", mv.type_id))
        head.append(_encode_value(mv))
    offsets = []
    pos = 0
    for t in tensors:
        pos = _align_up(pos, alignment)
        offsets.append(pos)
        pos += len(t.data)
    for t, off in zip(tensors, offsets):
        head.append(_encode_string(t.name))
        head.append(struct.pack("<I", len(t.dims)))
        head.append(struct.pack(f"<{len(t.dims)}Q", *t.dims))
        head.append(struct.pack("<IQ", t.type_id, off))
    blob = b"".join(head)
    base = _align_up(len(blob), alignment)
    out = bytearray(blob)
    out.extend(b"\x00" * (base - len(blob)))
    for t, off in zip(tensors, offsets):
        want = base + off
        out.extend(b"\x00" * (want - len(out)))
        out.extend(t.data)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def serialize_quant_matrix(qm: QuantMatrix) -> bytes:
    """Row-major superblock bytes, the exact GGUF tensor payload layout."""
    from .codec import serialize_sb

    return b"".join(serialize_sb(sb) for row in qm.rows for sb in row.blocks)
