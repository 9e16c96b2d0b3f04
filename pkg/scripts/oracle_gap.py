"""Distribution of solver loss over the exhaustive optimum on tiny columns.

    python scripts/oracle_gap.py --instances 200
"""

import argparse
import time

import numpy as np

from decoupleq.config import QuantConfig
from decoupleq.experiments import oracle_gap


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=200)
    ap.add_argument("--d-in", type=int, default=6)
    ap.add_argument("--approx", default="level1")
    ap.add_argument("--k", type=int, default=20)
    args = ap.parse_args()
    cfg = QuantConfig(approx=args.approx, inner_iters=args.k, warmup_iters=50, rounds=4)
    t0 = time.perf_counter()
    res = oracle_gap(range(args.instances), args.d_in, cfg)
    g_init, g_final, g_opt = res.T
    ratio = g_final / g_opt
    print(f"instances {len(res)}  runtime {time.perf_counter() - t0:.1f}s")
    print(f"g_final <= g_init: {np.mean(g_final <= g_init) * 100:.1f}%")
    print(f"g_opt <= g_final + 1e-12: {np.mean(g_opt <= g_final + 1e-12) * 100:.1f}%")
    print(f"exact optimum reached: {np.mean(ratio <= 1 + 1e-9) * 100:.1f}%")
    for q in (0.1, 0.25, 0.5, 0.75, 0.9, 1.0):
        print(f"ratio q{int(q * 100):03d}: {np.quantile(ratio, q):.6f}")
    print(f"init ratio median: {np.median(g_init / g_opt):.6f}")


if __name__ == "__main__":
    main()
