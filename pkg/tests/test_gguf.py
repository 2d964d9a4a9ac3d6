"""GGUF container roundtrips, tensor loading, and the type histogram."""
import struct

import numpy as np
import pytest

from fbfq import gguf
from fbfq.codec import Variant
from fbfq.errors import (
    BadMagic,
    FormatError,
    ShapeError,
    Truncated,
    UnsupportedType,
    UnsupportedVersion,
)
from fbfq.kernels import dequantize_matrix, quantize_matrix
from helpers import rng_for


def _quant_tensor(rng, name, rows, cols, variant):
    qm = quantize_matrix(rng.standard_normal((rows, cols)), variant)
    type_id = gguf.T_Q2_K if variant is Variant.Q2_K else gguf.T_Q3_K
    return qm, gguf.TensorSpec(name, (cols, rows), type_id, gguf.serialize_quant_matrix(qm))


def _demo_file(path, rng, version=3, alignment=None):
    meta = {
        "general.name": gguf.MetaValue(8, "demo"),
        "demo.count": gguf.MetaValue(4, 7),
        "demo.scale": gguf.MetaValue(6, 0.5),
        "demo.deep": gguf.MetaValue(7, True),
        "demo.layers": gguf.MetaValue(9, (2, 4, 8), elem_type=5),
        "demo.names": gguf.MetaValue(9, ("a", "bc"), elem_type=8),
        "demo.big": gguf.MetaValue(10, 1 << 40),
    }
    if alignment is not None:
        meta["general.alignment"] = gguf.MetaValue(4, alignment)
    q2, t2 = _quant_tensor(rng, "blk.0.attn.weight", 2, 512, Variant.Q2_K)
    q3, t3 = _quant_tensor(rng, "blk.1.ffn.weight", 3, 256, Variant.Q3_K)
    f32 = gguf.TensorSpec("out.bias", (6,), gguf.T_F32,
                          np.arange(6, dtype="<f4").tobytes())
    gguf.write_container(path, meta, [t2, t3, f32], version=version)
    return meta, (q2, q3), (t2, t3, f32)


@pytest.mark.parametrize("version", [2, 3])
@pytest.mark.parametrize("alignment", [None, 64])
def test_container_roundtrip(tmp_path, version, alignment):
    path = tmp_path / "demo.gguf"
    meta, _, specs = _demo_file(path, rng_for(1), version=version, alignment=alignment)
    got_meta, tensors = gguf.read_container(path)
    assert got_meta == meta
    assert [t.name for t in tensors] == [s.name for s in specs]
    assert [t.dims for t in tensors] == [s.dims for s in specs]
    assert [t.type_id for t in tensors] == [s.type_id for s in specs]
    a = alignment or gguf.DEFAULT_ALIGNMENT
    for t in tensors:
        assert t.offset % a == 0
        assert t.file_offset % a == 0


def test_loaded_tensor_reserializes_byte_exact(tmp_path):
    path = tmp_path / "demo.gguf"
    _, (q2, q3), _ = _demo_file(path, rng_for(2))
    _, tensors = gguf.read_container(path)
    got2 = gguf.load_quant_tensor(path, tensors[0])
    assert got2.n_rows == 2 and got2.row_len == 512
    assert gguf.serialize_quant_matrix(got2) == gguf.serialize_quant_matrix(q2)
    got3 = gguf.load_quant_tensor(path, tensors[1])
    assert np.array_equal(dequantize_matrix(got3), dequantize_matrix(q3))


def test_outer_extents_multiply_into_rows(tmp_path):
    rng = rng_for(3)
    qm = quantize_matrix(rng.standard_normal((6, 256)), Variant.Q2_K)
    spec = gguf.TensorSpec("t3d", (256, 2, 3), gguf.T_Q2_K,
                           gguf.serialize_quant_matrix(qm))
    path = tmp_path / "t3.gguf"
    gguf.write_container(path, {}, [spec])
    _, tensors = gguf.read_container(path)
    got = gguf.load_quant_tensor(path, tensors[0])
    assert got.n_rows == 6 and got.row_len == 256


def test_load_rejects_wrong_types(tmp_path):
    path = tmp_path / "demo.gguf"
    _demo_file(path, rng_for(4))
    _, tensors = gguf.read_container(path)
    with pytest.raises(UnsupportedType):
        gguf.load_quant_tensor(path, tensors[2])  # the F32 bias
    bad = gguf.TensorInfo("x", (300,), gguf.T_Q2_K, 0, tensors[0].file_offset)
    with pytest.raises(ShapeError):
        gguf.load_quant_tensor(path, bad)


def test_reader_errors(tmp_path):
    path = tmp_path / "bad.gguf"
    path.write_bytes(b"NOPE")
    with pytest.raises(BadMagic):
        gguf.read_container(path)
    path.write_bytes(b"GGUF" + struct.pack("<I", 7) + b"\x00" * 16)
    with pytest.raises(UnsupportedVersion):
        gguf.read_container(path)
    path.write_bytes(b"GGUF" + struct.pack("<I", 3) + b"\x00" * 3)
    with pytest.raises(Truncated):
        gguf.read_container(path)
    # declare one kv pair, then end the file
    path.write_bytes(b"GGUF" + struct.pack("<IQQ", 3, 0, 1))
    with pytest.raises(Truncated):
        gguf.read_container(path)


def test_unknown_metadata_type(tmp_path):
    path = tmp_path / "weird.gguf"
    body = b"GGUF" + struct.pack("<IQQ", 3, 0, 1)
    key = "k".encode()
    body += struct.pack("<Q", len(key)) + key + struct.pack("<I", 99)
    path.write_bytes(body)
    with pytest.raises(FormatError):
        gguf.read_container(path)


def test_histogram_single_type(tmp_path):
    rng = rng_for(5)
    _, spec = _quant_tensor(rng, "w", 1, 256, Variant.Q2_K)
    path = tmp_path / "one.gguf"
    gguf.write_container(path, {}, [spec])
    h = gguf.type_histogram(path)
    assert len(h.rows) == 1
    assert h.rows[0].type_name == "Q2_K" and h.rows[0].pct == 100.0


def test_histogram_even_split_and_order_invariance(tmp_path):
    rng = rng_for(6)
    _, a = _quant_tensor(rng, "a", 2, 256, Variant.Q2_K)
    _, b = _quant_tensor(rng, "b", 1, 512, Variant.Q3_K)
    p1, p2 = tmp_path / "ab.gguf", tmp_path / "ba.gguf"
    gguf.write_container(p1, {}, [a, b])
    gguf.write_container(p2, {}, [b, a])
    h1, h2 = gguf.type_histogram(p1), gguf.type_histogram(p2)
    assert h1 == h2
    assert [r.pct for r in h1.rows] == [50.0, 50.0]
    assert abs(sum(r.pct for r in h1.rows) - 100.0) < 0.1


def test_truncated_tensor_payload(tmp_path):
    rng = rng_for(7)
    _, spec = _quant_tensor(rng, "w", 2, 512, Variant.Q3_K)
    path = tmp_path / "cut.gguf"
    gguf.write_container(path, {}, [spec])
    whole = path.read_bytes()
    path.write_bytes(whole[:-10])
    _, tensors = gguf.read_container(path)  # header still parses
    with pytest.raises(Truncated):
        gguf.load_quant_tensor(path, tensors[0])


def test_writer_rejects_bad_version(tmp_path):
    with pytest.raises(UnsupportedVersion):
        gguf.write_container(tmp_path / "x.gguf", {}, [], version=1)


def test_meta_value_validation():
    with pytest.raises(FormatError):
        gguf.MetaValue(99, 0)
    with pytest.raises(FormatError):
        gguf.MetaValue(9, (1, 2))  # array without an element type
