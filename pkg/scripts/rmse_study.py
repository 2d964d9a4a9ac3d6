#!/usr/bin/env python3
"""Reconstruction error study: RMSE of each variant across input distributions.

Quantizes random matrices drawn from a few distributions, dequantizes, and
reports RMSE relative to the input RMS so variants are comparable.
"""
import argparse

import numpy as np

from fbfq.codec import Variant
from fbfq.kernels import dequantize_matrix, quantize_matrix

DISTRIBUTIONS = {
    "normal": lambda rng, shape: rng.standard_normal(shape),
    "laplace": lambda rng, shape: rng.laplace(size=shape),
    "uniform": lambda rng, shape: rng.uniform(-1.0, 1.0, size=shape),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=32)
    ap.add_argument("--cols", type=int, default=2048)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("distribution,variant,rmse,relative_rmse")
    for dist_name, draw in DISTRIBUTIONS.items():
        for variant in (Variant.Q2_K, Variant.Q3_K, Variant.Q8_K):
            errs = []
            rels = []
            for t in range(args.trials):
                rng = np.random.default_rng(args.seed * 1000 + t)
                a = draw(rng, (args.rows, args.cols)).astype(np.float64)
                back = dequantize_matrix(quantize_matrix(a, variant)).astype(np.float64)
                rmse = float(np.sqrt(np.mean((back - a) ** 2)))
                errs.append(rmse)
                rels.append(rmse / float(np.sqrt(np.mean(a ** 2))))
            print(f"{dist_name},{variant.value},{np.mean(errs):.6f},{np.mean(rels):.6f}")


if __name__ == "__main__":
    main()
