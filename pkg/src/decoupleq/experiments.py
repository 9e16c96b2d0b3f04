"""Seeded random instances and sweeps shared by scripts/ and the test suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import QuantConfig
from .layerwise import ColumnProblem, solve_column
from .linalg import build_hessian
from .oracle import exhaustive_solve


def random_problem(seed: int, d_in: int, cfg: QuantConfig, rows: int = 32) -> ColumnProblem:
    """Gaussian calibration inputs (rows x d_in) and a Gaussian weight column."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, d_in))
    b = rng.standard_normal(d_in)
    return ColumnProblem(b, build_hessian(x, cfg.damping_fraction), cfg, label=f"seed {seed}")


def oracle_gap(seeds, d_in=6, cfg=None, rows=32):
    """Per seed: (g_init, g_final, g_opt) for the solver against full enumeration."""
    cfg = cfg or QuantConfig(approx="level1", inner_iters=20, warmup_iters=50, rounds=4)
    out = []
    for seed in seeds:
        prob = random_problem(seed, d_in, cfg, rows)
        sol = solve_column(prob)
        out.append((sol.g_init, sol.g_final, exhaustive_solve(prob).g_opt))
    return np.array(out)


def k_sweep(seeds, ks=(1, 2, 4, 8, 20), d_in=16, groups=2, rows=64, base=None):
    """Final loss per seed for level2 and for level1 at each K.

    Returns (level2 losses, {K: level1 losses}).
    """
    base = base or QuantConfig(group_count=groups)
    level2, level1 = [], {k: [] for k in ks}
    for seed in seeds:
        prob = random_problem(seed, d_in, replace(base, approx="level2"), rows)
        level2.append(solve_column(prob).g_final)
        for k in ks:
            prob.cfg = replace(base, approx="level1", inner_iters=k)
            level1[k].append(solve_column(prob).g_final)
    return np.array(level2), {k: np.array(v) for k, v in level1.items()}


def random_block(seed: int, d: int = 4, h: int = 8, rows: int = 64, bits: int = 2,
                 activation: str = "gelu"):
    """Float MLP block, its 2-bit layer-wise quantization and calibration data.

    Returns (spec, params, x, y_ref) ready for ``finetune_block``.
    """
    from .blockwise import BlockSpec, float_block_forward, initial_params, ACTIVATIONS, _layer_norm
    from .layerwise import quantize_layer

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, d))
    gain = 1.0 + 0.1 * rng.standard_normal(d)
    bias = 0.1 * rng.standard_normal(d)
    w1 = rng.standard_normal((d, h)) / np.sqrt(d)
    w2 = rng.standard_normal((h, d)) / np.sqrt(h)
    cfg = QuantConfig(bits=bits)
    u, _ = _layer_norm(x, gain, bias)
    fc1, _ = quantize_layer(w1, build_hessian(u, cfg.damping_fraction), cfg)
    hid = ACTIVATIONS[activation][0](u @ w1)
    fc2, _ = quantize_layer(w2, build_hessian(hid, cfg.damping_fraction), cfg)
    spec = BlockSpec(fc1, fc2, activation)
    y_ref = float_block_forward(x, gain, bias, w1, w2, activation)
    return spec, initial_params(spec, gain, bias), x, y_ref


def random_block_run(seed: int, epochs: int = 4, lr: float = 1e-5, weight_decay: float = 1e-6):
    from .blockwise import finetune_block

    spec, params, x, y_ref = random_block(seed)
    _, rep = finetune_block(spec, params, x, y_ref, epochs, 32, lr, weight_decay, seed)
    return rep
