"""Command-line front end.

Subcommands: quantize, dequantize, matmul, inspect, bench, replay. Tensors
move through .fbft files: a 16-byte header (magic "FBFT", u32 variant code,
u32 rows, u32 cols, all little-endian) followed by the payload, which is
row-major float32 for code 0 or row-major serialized superblocks for codes
1 (Q2_K), 2 (Q3_K), 3 (Q8_K).

Exit codes: 0 success, 2 validation or format error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import struct
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import gguf
from .codec import (
    SB_BYTES,
    SB_LEN,
    QuantRow,
    Variant,
    deserialize_sb,
    parse_variant,
    serialize_sb,
)
from .driver import AccelCaps, Driver, LayerDims, plan_tiles
from .errors import BadMagic, FbfqError, FormatError, InvalidInput, ShapeError, Truncated
from .isa import read_stream
from .kernels import (
    QuantMatrix,
    dequant_matmul_oracle,
    dequantize_matrix,
    matmul_bfq,
    quantize_input,
    quantize_matrix,
)
from .sim import CycleStats, SimConfig, Simulator, estimate_cycles

FBFT_MAGIC = b"FBFT"
_CODE_TO_VARIANT = {1: Variant.Q2_K, 2: Variant.Q3_K, 3: Variant.Q8_K}
_VARIANT_TO_CODE = {v: c for c, v in _CODE_TO_VARIANT.items()}


def write_tensor_file(path, tensor) -> None:
    """Write a float32 matrix or QuantMatrix as an .fbft file."""
    if isinstance(tensor, QuantMatrix):
        code = _VARIANT_TO_CODE[tensor.variant]
        rows, cols = tensor.n_rows, tensor.row_len
        payload = b"".join(serialize_sb(sb) for row in tensor.rows for sb in row.blocks)
    else:
        a = np.ascontiguousarray(np.asarray(tensor, dtype="<f4"))
        if a.ndim != 2:
            raise ShapeError(f"tensor files hold 2-D data, got {a.ndim}-D")
        code = 0
        rows, cols = a.shape
        payload = a.tobytes()
    with open(path, "wb") as fh:
        fh.write(FBFT_MAGIC + struct.pack("<III", code, rows, cols) + payload)


def read_tensor_file(path):
    """Read an .fbft file back as np.float32 (code 0) or QuantMatrix."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise Truncated(f"{path}: shorter than the 16-byte header")
    if raw[:4] != FBFT_MAGIC:
        raise BadMagic(f"{path}: not an FBFT tensor file")
    code, rows, cols = struct.unpack_from("<III", raw, 4)
    if code == 0:
        need = 16 + rows * cols * 4
        if len(raw) != need:
            raise Truncated(f"{path}: wanted {need} bytes, got {len(raw)}")
        return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, cols).copy()
    variant = _CODE_TO_VARIANT.get(code)
    if variant is None:
        raise FormatError(f"{path}: unknown variant code {code}")
    if cols % SB_LEN:
        raise ShapeError(f"{path}: quantized cols {cols} not a multiple of {SB_LEN}")
    per = SB_BYTES[variant]
    n_sb = cols // SB_LEN
    need = 16 + rows * n_sb * per
    if len(raw) != need:
        raise Truncated(f"{path}: wanted {need} bytes, got {len(raw)}")
    pos = 16
    qrows = []
    for _ in range(rows):
        blocks = []
        for _ in range(n_sb):
            blocks.append(deserialize_sb(raw[pos:pos + per], variant))
            pos += per
        qrows.append(QuantRow(variant=variant, blocks=tuple(blocks)))
    return QuantMatrix(variant=variant, rows=tuple(qrows), row_len=cols)


def _read_f32_input(path) -> np.ndarray:
    """Float input for quantize: .fbft float file, or raw little-endian f32."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FBFT_MAGIC:
        t = read_tensor_file(path)
        if isinstance(t, QuantMatrix):
            raise InvalidInput(f"{path} is already quantized ({t.variant.value})")
        return t
    raw = open(path, "rb").read()
    if len(raw) % 4:
        raise FormatError(f"{path}: raw float32 length {len(raw)} not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").reshape(1, -1).copy()


@dataclass
class RunReport:
    """One matmul run: identity, timing, optional oracle errors and cycles."""

    engine: str
    m: int
    k: int
    n: int
    variant: str
    wall_s: float
    max_abs_err: float | None = None
    mean_abs_err: float | None = None
    max_rel_err: float | None = None
    mean_rel_err: float | None = None
    cycles: CycleStats | None = None

    def as_flat_dict(self) -> dict:
        d = {
            "engine": self.engine, "m": self.m, "k": self.k, "n": self.n,
            "variant": self.variant, "wall_s": self.wall_s,
        }
        if self.max_abs_err is not None:
            d.update(
                max_abs_err=self.max_abs_err, mean_abs_err=self.mean_abs_err,
                max_rel_err=self.max_rel_err, mean_rel_err=self.mean_rel_err,
            )
        if self.cycles is not None:
            d.update(self.cycles.as_dict())
        return d


def _emit_flat(d: dict, fmt: str, out=None) -> None:
    if out is None:
        out = sys.stdout
    if fmt == "json":
        print(json.dumps(d), file=out)
    elif fmt == "csv":
        print(",".join(d.keys()), file=out)
        print(",".join(str(v) for v in d.values()), file=out)
    else:
        for k, v in d.items():
            print(f"{k}={v}", file=out)


def _parse_caps(text: str) -> AccelCaps:
    parts = text.split(":")
    if len(parts) != 4:
        raise InvalidInput(f"caps must be w:i:f:o, got {text!r}")
    try:
        w, i, f, o = (int(p) for p in parts)
    except ValueError:
        raise InvalidInput(f"caps fields must be integers, got {text!r}") from None
    return AccelCaps(weight_cache_sb=w, input_cache_sb=i, n_fifos=f, out_buf_elems=o)


def _parse_dims(text: str) -> tuple:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise InvalidInput(f"dims must be MxKxN, got {text!r}")
    try:
        m, k, n = (int(p) for p in parts)
    except ValueError:
        raise InvalidInput(f"dims fields must be integers, got {text!r}") from None
    return m, k, n


def _sim_config(args, caps: AccelCaps) -> SimConfig:
    return SimConfig(n_fifos=caps.n_fifos, lanes=args.lanes, clock_mhz=args.clock_mhz)


# ---------------------------------------------------------------- subcommands


def cmd_quantize(args) -> int:
    x = _read_f32_input(args.input)
    variant = parse_variant(args.variant)
    if x.shape[1] % SB_LEN:
        raise ShapeError(f"row length {x.shape[1]} is not a multiple of {SB_LEN}")
    qm = quantize_matrix(x.astype(np.float64), variant)
    write_tensor_file(args.out, qm)
    deq = dequantize_matrix(qm)
    rmse = float(np.sqrt(np.mean((deq.astype(np.float64) - x.astype(np.float64)) ** 2)))
    _emit_flat(
        {"out": args.out, "variant": variant.value, "rows": qm.n_rows,
         "cols": qm.row_len, "rmse": rmse},
        args.format,
    )
    return 0


def cmd_dequantize(args) -> int:
    t = read_tensor_file(args.input)
    if not isinstance(t, QuantMatrix):
        raise InvalidInput(f"{args.input} holds float32 data already")
    y = dequantize_matrix(t)
    write_tensor_file(args.out, y)
    _emit_flat(
        {"out": args.out, "variant": t.variant.value,
         "rows": y.shape[0], "cols": y.shape[1]},
        args.format,
    )
    return 0


def _matmul_operands(args):
    if args.dims:
        m, k, n = _parse_dims(args.dims)
        rng = np.random.default_rng(args.seed)
        w = rng.standard_normal((m, k))
        x = rng.standard_normal((k, n))
        wq = quantize_matrix(w, parse_variant(args.variant))
        return wq, x.astype(np.float32)
    if not args.weights or not args.inputs:
        raise InvalidInput("matmul needs WEIGHTS and INPUTS files, or --dims with --seed")
    wt = read_tensor_file(args.weights)
    if isinstance(wt, QuantMatrix):
        wq = wt
    else:
        wq = quantize_matrix(wt.astype(np.float64), parse_variant(args.variant))
    xt = read_tensor_file(args.inputs)
    if isinstance(xt, QuantMatrix):
        raise InvalidInput("the input operand must be float32 (it is quantized on the fly)")
    return wq, xt


def cmd_matmul(args) -> int:
    wq, x = _matmul_operands(args)
    caps = _parse_caps(args.caps) if args.caps else AccelCaps()
    stats = None
    t0 = time.perf_counter()
    if args.engine == "ref":
        out = dequant_matmul_oracle(wq, quantize_input(x))
    elif args.engine == "fused":
        out = matmul_bfq(wq, x)
    else:
        sim = Simulator(caps=caps, config=_sim_config(args, caps))
        out = Driver(sim).run_matmul(wq, x, record_path=args.record)
        stats = sim.cycle_report()
    wall = time.perf_counter() - t0
    report = RunReport(
        engine=args.engine, m=wq.n_rows, k=wq.row_len, n=x.shape[1],
        variant=wq.variant.value, wall_s=wall, cycles=stats,
    )
    if args.compare:
        ref = dequant_matmul_oracle(wq, quantize_input(x)).astype(np.float64)
        diff = np.abs(out.astype(np.float64) - ref)
        rel = diff / (1.0 + np.abs(ref))
        report.max_abs_err = float(diff.max())
        report.mean_abs_err = float(diff.mean())
        report.max_rel_err = float(rel.max())
        report.mean_rel_err = float(rel.mean())
    if args.out:
        write_tensor_file(args.out, out.astype(np.float32))
    d = report.as_flat_dict()
    if out.size <= 8:
        for (r, c), v in np.ndenumerate(out):
            d[f"result[{r},{c}]"] = f"{v:.6g}"
    d["result_sum"] = f"{float(out.sum()):.6g}"
    _emit_flat(d, args.format)
    return 0


def cmd_inspect(args) -> int:
    hist = gguf.type_histogram(args.gguf)
    _, tensors = gguf.read_container(args.gguf)
    hist_rows = [
        {"type": r.type_name, "tensors": r.n_tensors, "elems": r.n_elems,
         "pct": round(r.pct, 4)}
        for r in hist.rows
    ]
    tensor_rows = [
        {"name": t.name, "type": t.type_name,
         "dims": "x".join(str(d) for d in t.dims),
         "elems": t.n_elems, "offset": t.offset}
        for t in tensors
    ]
    if args.format == "json":
        print(json.dumps({"histogram": hist_rows, "tensors": tensor_rows}))
        return 0
    if args.format == "csv":
        print("type,tensors,elems,pct")
        for r in hist_rows:
            print(f"{r['type']},{r['tensors']},{r['elems']},{r['pct']}")
        print()
        print("name,type,dims,elems,offset")
        for r in tensor_rows:
            print(f"{r['name']},{r['type']},{r['dims']},{r['elems']},{r['offset']}")
        return 0
    print("types:")
    for r in hist_rows:
        print(f"  {r['type']:8s} tensors={r['tensors']} elems={r['elems']} pct={r['pct']}")
    print("tensors:")
    for r in tensor_rows:
        print(
            f"  {r['name']} type={r['type']} dims={r['dims']} "
            f"elems={r['elems']} offset={r['offset']}"
        )
    return 0


_BENCH_FIELDS = ("m", "k", "n", "variant", "lanes", "fast_path", "n_tiles")


def cmd_bench(args) -> int:
    caps = _parse_caps(args.caps) if args.caps else AccelCaps()
    variant = parse_variant(args.variant)
    try:
        lanes_list = [int(s) for s in args.lanes.split(",")]
    except ValueError:
        raise InvalidInput(f"lanes must be integers, got {args.lanes!r}") from None
    rows = []
    for dtext in args.dims:
        m, k, n = _parse_dims(dtext)
        dims = LayerDims(m=m, k=k, n=n)
        plan = plan_tiles(dims, caps)
        for lanes in lanes_list:
            cfg = SimConfig(n_fifos=caps.n_fifos, lanes=lanes, clock_mhz=args.clock_mhz)
            est = estimate_cycles(plan, dims, cfg, variant)
            row = {
                "m": m, "k": k, "n": n, "variant": variant.value, "lanes": lanes,
                "fast_path": int(plan.fast_path), "n_tiles": len(plan.tiles),
            }
            row.update(est.as_dict())
            row["est_ms"] = est.seconds * 1e3
            rows.append(row)
    if args.format == "json":
        print(json.dumps(rows))
        return 0
    # the estimate columns are the point of this command, so text is CSV too
    header = list(rows[0].keys()) if rows else []
    print(",".join(header))
    for row in rows:
        print(",".join(str(row[h]) for h in header))
    return 0


def cmd_replay(args) -> int:
    words = read_stream(args.stream)
    caps = _parse_caps(args.caps) if args.caps else AccelCaps()
    sim = Simulator(caps=caps, config=_sim_config(args, caps))
    sim.ingest(words)
    out = sim.read_output()
    stats = sim.cycle_report()
    if args.out:
        write_tensor_file(args.out, out.reshape(1, -1))
    if args.format == "json":
        print(json.dumps({
            "n_words": len(words), "n_outputs": int(out.size),
            "outputs": [float(v) for v in out],
            "cycles": stats.as_dict(),
        }))
        return 0
    d = {"n_words": len(words), "n_outputs": int(out.size)}
    if out.size <= 8:
        for i, v in enumerate(out):
            d[f"out[{i}]"] = f"{float(v):.6g}"
    d["output_sum"] = f"{float(out.sum()):.6g}"
    d.update(stats.as_dict())
    _emit_flat(d, args.format)
    return 0


# --------------------------------------------------------------------- parser


def _add_format(p) -> None:
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")


def _add_sim_flags(p) -> None:
    p.add_argument("--caps", help="cache capacities as w:i:f:o "
                   "(weight SBs : input SBs : fifos : accumulator elems)")
    p.add_argument("--lanes", type=int, default=16,
                   help="vector lanes, must divide 16 (default 16)")
    p.add_argument("--clock-mhz", type=float, default=200.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fbfq",
        description="Block-floating-point quantization toolkit and accelerator model",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize float32 data to an .fbft file")
    p.add_argument("input", help="raw little-endian float32, or a float .fbft file")
    p.add_argument("--variant", required=True, help="q2k, q3k, or q8k")
    p.add_argument("--out", required=True)
    _add_format(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dequantize", help="expand a quantized .fbft file to float32")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    _add_format(p)
    p.set_defaults(func=cmd_dequantize)

    p = sub.add_parser("matmul", help="run W @ X on one of the three engines")
    p.add_argument("weights", nargs="?", help=".fbft weights (quantized or float)")
    p.add_argument("inputs", nargs="?", help=".fbft float inputs")
    p.add_argument("--dims", help="synthesize seeded operands of shape MxKxN instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="q2k",
                   help="weight variant when quantizing/synthesizing (default q2k)")
    p.add_argument("--engine", choices=("ref", "fused", "sim"), default="fused")
    p.add_argument("--compare", action="store_true",
                   help="report error stats against the dequantize-then-dot oracle")
    p.add_argument("--record", help="write the instruction stream to this .fbfq file")
    p.add_argument("--out", help="write the result to this .fbft file")
    _add_sim_flags(p)
    _add_format(p)
    p.set_defaults(func=cmd_matmul)

    p = sub.add_parser("inspect", help="histogram and tensor table of a GGUF file")
    p.add_argument("gguf")
    _add_format(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="cycle estimates over dims and lane sweeps")
    p.add_argument("dims", nargs="+", help="one or more MxKxN triples")
    p.add_argument("--variant", default="q2k")
    p.add_argument("--lanes", default="16", help="comma list to sweep, e.g. 4,8,16")
    p.add_argument("--caps")
    p.add_argument("--clock-mhz", type=float, default=200.0)
    _add_format(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="execute a recorded .fbfq instruction stream")
    p.add_argument("stream")
    p.add_argument("--out", help="write the flat outputs to this .fbft file")
    _add_sim_flags(p)
    _add_format(p)
    p.set_defaults(func=cmd_replay)

    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except FbfqError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
