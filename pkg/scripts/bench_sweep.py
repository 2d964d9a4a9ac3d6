#!/usr/bin/env python3
"""Sweep the cycle model over K and lane counts, printing CSV.

With --check, each point is also executed on the event simulator and the
closed-form estimate is asserted to match its counters exactly.
"""
import argparse
import sys

import numpy as np

from fbfq.codec import Variant, parse_variant
from fbfq.driver import AccelCaps, Driver, LayerDims, plan_tiles
from fbfq.kernels import quantize_matrix
from fbfq.sim import SimConfig, Simulator, estimate_cycles


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--k-sb", default="1,2,4,8,16", help="comma list of K/256 values")
    ap.add_argument("--lanes", default="1,2,4,8,16")
    ap.add_argument("--variant", default="q2k")
    ap.add_argument("--clock-mhz", type=float, default=200.0)
    ap.add_argument("--check", action="store_true",
                    help="run the event simulator at each point and compare")
    args = ap.parse_args()

    variant = parse_variant(args.variant)
    caps = AccelCaps()
    print("m,n,k,lanes,fast_path,cycles_compute,cycles_total,macs_per_cycle,est_ms")
    for k_sb in (int(s) for s in args.k_sb.split(",")):
        dims = LayerDims(args.m, 256 * k_sb, args.n)
        plan = plan_tiles(dims, caps)
        for lanes in (int(s) for s in args.lanes.split(",")):
            cfg = SimConfig(lanes=lanes, clock_mhz=args.clock_mhz)
            est = estimate_cycles(plan, dims, cfg, variant)
            if args.check:
                rng = np.random.default_rng(k_sb * 100 + lanes)
                wq = quantize_matrix(rng.standard_normal((dims.m, dims.k)), variant)
                sim = Simulator(caps=caps, config=cfg)
                Driver(sim).run_matmul(wq, rng.standard_normal((dims.k, dims.n)))
                if sim.cycle_report() != est:
                    sys.exit(f"estimate mismatch at k_sb={k_sb} lanes={lanes}")
            print(f"{dims.m},{dims.n},{dims.k},{lanes},{int(plan.fast_path)},"
                  f"{est.cycles_compute},{est.cycles_total},"
                  f"{est.macs_per_cycle:.3f},{est.seconds * 1e3:.6f}")


if __name__ == "__main__":
    main()
