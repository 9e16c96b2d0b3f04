"""Pre-runs that fix the frozen acceptance thresholds.

The K-trend noise tolerance is twice the largest paired-bootstrap standard
error of the change in median level1 loss between adjacent K, over a seed
range disjoint from the acceptance seeds. The block fine-tune pre-run reports how often the loss strictly drops.

    python scripts/calibrate_tolerances.py
"""

import numpy as np

from decoupleq.experiments import k_sweep, random_block_run


def k_trend_tolerance(seeds=range(1000, 1100), ks=(1, 2, 4, 8, 20), resamples=1000):
    """Twice the largest paired-bootstrap SE of median(K_next) - median(K)."""
    _, l1 = k_sweep(seeds, ks=ks)
    n = len(l1[ks[0]])
    rng = np.random.default_rng(12345)
    idx = [rng.integers(0, n, n) for _ in range(resamples)]
    worst = 0.0
    for a, b in zip(ks, ks[1:]):
        diffs = [np.median(l1[b][i]) - np.median(l1[a][i]) for i in idx]
        worst = max(worst, float(np.std(diffs)))
    return 2.0 * worst


def main():
    print(f"k-trend tolerance: {k_trend_tolerance():.6f}")
    drops = []
    for seed in range(1000, 1020):
        rep = random_block_run(seed)
        drops.append(rep.final_loss < rep.initial_loss)
        print(f"seed {seed}: {rep.initial_loss:.8f} -> {rep.final_loss:.8f}")
    print(f"strict improvement {np.mean(drops) * 100:.0f}%")


if __name__ == "__main__":
    main()
