#!/usr/bin/env python3
"""Generate small demo inputs for the CLI: FBFT tensors and a GGUF container.

Usage: python3 scripts/make_demo_data.py --out-dir demo_data
"""
import argparse
from pathlib import Path

import numpy as np

from fbfq import gguf
from fbfq.cli import write_tensor_file
from fbfq.codec import Variant
from fbfq.kernels import quantize_matrix


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="demo_data")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    w = rng.standard_normal((8, 1024)).astype(np.float32)
    x = rng.standard_normal((1024, 4)).astype(np.float32)
    write_tensor_file(out / "w_f32.fbft", w)
    write_tensor_file(out / "x_f32.fbft", x)
    write_tensor_file(out / "w_q2k.fbft", quantize_matrix(w, Variant.Q2_K))
    write_tensor_file(out / "w_q3k.fbft", quantize_matrix(w, Variant.Q3_K))

    tensors = []
    for layer in range(3):
        variant = Variant.Q2_K if layer % 2 == 0 else Variant.Q3_K
        type_id = gguf.T_Q2_K if variant is Variant.Q2_K else gguf.T_Q3_K
        mat = quantize_matrix(rng.standard_normal((4, 512)), variant)
        tensors.append(gguf.TensorSpec(
            f"blk.{layer}.attn_q.weight", (512, 4), type_id,
            gguf.serialize_quant_matrix(mat),
        ))
    bias = rng.standard_normal(16).astype("<f4")
    tensors.append(gguf.TensorSpec("output.bias", (16,), gguf.T_F32, bias.tobytes()))
    meta = {
        "general.name": gguf.MetaValue(8, "fbfq-demo"),
        "general.alignment": gguf.MetaValue(4, 32),
    }
    gguf.write_container(out / "demo.gguf", meta, tensors)

    for p in sorted(out.iterdir()):
        print(f"{p}  ({p.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
