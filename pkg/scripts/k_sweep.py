"""Level1 final loss against K, with level2 as reference.

    python scripts/k_sweep.py --instances 100
"""

import argparse
import time

import numpy as np

from decoupleq.experiments import k_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--start", type=int, default=0)
    ap.add_argument("--ks", default="1,2,4,8,20")
    args = ap.parse_args()
    ks = tuple(int(k) for k in args.ks.split(","))
    t0 = time.perf_counter()
    l2, l1 = k_sweep(range(args.start, args.start + args.instances), ks)
    print(f"instances {len(l2)}  runtime {time.perf_counter() - t0:.1f}s")
    print(f"level2       median {np.median(l2):.6f}  mean {np.mean(l2):.6f}")
    for k in ks:
        print(f"level1 K={k:<3d} median {np.median(l1[k]):.6f}  mean {np.mean(l1[k]):.6f}"
              f"  vs level2 win/tie/lose {np.sum(l1[k] < l2)}/{np.sum(l1[k] == l2)}/{np.sum(l1[k] > l2)}")


if __name__ == "__main__":
    main()
