"""Command-line front end.

Exit codes: 0 success, 1 validation, 2 I/O or file format, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import formats
from .blockwise import BlockSpec, block_loss, finetune_block, float_block_forward, initial_params, updated_layers
from .config import ApproxLevel, QuantConfig
from .errors import DecoupleQError, ValidationError
from .layerwise import ColumnProblem, layer_loss, quantize_layer, solve_column
from .linalg import Hessian, build_hessian
from .oracle import DEFAULT_BUDGET, exhaustive_solve

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("decoupleq")

FORMATS_HELP = f"""\
file formats:
  tensor files   magic {formats.TENSOR_MAGIC!r}: u16 version, u8 dtype (0=f32, 1=f64),
                 u8 ndim, u64 dims, row-major little-endian payload
  quant files    magic {formats.QUANT_MAGIC!r}: u16 version, u8 bits, i32 alpha, i32 beta,
                 u64 d_in, u64 d_out, u32 ng, packed codes (c = w - alpha, LSB-first,
                 one byte-aligned run per output column), f32 scales, f32 zeros
  config files   TOML; keys are the long flag names with '-' replaced by '_'
                 (bits, groups, approx, n, k, m, grid_points, p_min, p_max,
                 per_group_p, damping, tol, seed, workers); flags win

exit codes: 0 ok, 1 validation, 2 I/O/format, 3 numerical failure
"""

# flag name -> QuantConfig field
_CFG_FLAGS = {
    "bits": "bits",
    "groups": "group_count",
    "approx": "approx",
    "n": "rounds",
    "k": "inner_iters",
    "m": "warmup_iters",
    "grid_points": "grid_points",
    "p_min": "p_min",
    "p_max": "p_max",
    "per_group_p": "per_group_p",
    "damping": "damping_fraction",
    "tol": "pgd_tolerance",
    "seed": "seed",
}


def _add_quant_flags(p):
    g = p.add_argument_group("solver configuration")
    g.add_argument("--config", help="TOML file with defaults for the flags below")
    g.add_argument("--bits", type=int, help="bit width: 2, 3 or 4 (default 2)")
    g.add_argument("--groups", type=int, help="groups per column; must divide d_in (default 1)")
    g.add_argument("--approx", choices=[a.value for a in ApproxLevel], help="suffix re-optimization (default level2)")
    g.add_argument("--n", type=int, help="alternation rounds (default 4)")
    g.add_argument("--k", type=int, help="PGD iterations after each rounding step, level1 (default 8)")
    g.add_argument("--m", type=int, help="warm-up PGD iterations, level1 (default 50)")
    g.add_argument("--grid-points", type=int, help="candidates in the init scan (default 51)")
    g.add_argument("--p-min", type=float, help="smallest range factor in the init scan (default 0.5)")
    g.add_argument("--p-max", type=float, help="largest range factor in the init scan (default 1.0)")
    g.add_argument("--per-group-p", action="store_true", default=None, help="pick the range factor per group")
    g.add_argument("--damping", type=float, help="Hessian damping fraction, where one is built (default 0.01)")
    g.add_argument("--tol", type=float, help="PGD stopping tolerance (default 1e-7)")
    g.add_argument("--seed", type=int, help="seed for power iteration (default 0)")
    g.add_argument("--workers", type=int, help="parallel column workers (default 1)")
    g.add_argument(
        "--fixed-init-sz",
        metavar="S,Z",
        help="pin (s, z) for every column and group instead of searching; debugging aid",
    )


def _load_config_file(path):
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    unknown = set(data) - set(_CFG_FLAGS) - {"workers"}
    if unknown:
        raise ValidationError(f"{path}: unknown keys {sorted(unknown)}")
    return data


def _settings(args) -> tuple[QuantConfig, int]:
    merged = _load_config_file(args.config) if args.config else {}
    for flag in list(_CFG_FLAGS) + ["workers"]:
        val = getattr(args, flag, None)
        if val is not None:
            merged[flag] = val
    workers = int(merged.pop("workers", 1))
    if workers < 1:
        raise ValidationError("--workers must be >= 1")
    kwargs = {_CFG_FLAGS[k]: v for k, v in merged.items()}
    try:
        cfg = QuantConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(str(exc)) from exc
    return cfg, workers


def _fixed_sz(args):
    if not getattr(args, "fixed_init_sz", None):
        return None
    try:
        s, z = (float(t) for t in args.fixed_init_sz.split(","))
    except ValueError as exc:
        raise ValidationError("--fixed-init-sz expects two numbers 'S,Z'") from exc
    return s, z


def _read_matrix(path, name):
    a = formats.read_tensor(path)
    if a.ndim != 2:
        raise ValidationError(f"{name} {path}: expected a 2-D tensor, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} {path}: contains NaN or Inf")
    return a


def _read_hessian(path) -> Hessian:
    return Hessian.from_matrix(_read_matrix(path, "hessian"))


def cmd_hessian(args):
    x = _read_matrix(args.activations, "activations")
    if x.size == 0:
        raise ValidationError("empty calibration set")
    h = build_hessian(x, args.damping)
    formats.write_tensor(args.out, h.matrix)
    diag = np.diag(h.matrix)
    print(f"batch_size {h.source_rows}")
    print(f"lambda {h.damping_lambda:.6g}")
    print(f"diag min {diag.min():.6g} mean {diag.mean():.6g} max {diag.max():.6g}")
    return 0


def _stored_loss(w0, h, layer):
    s, z = formats.stored_f32(layer.scales), formats.stored_f32(layer.zeros)
    return [layer_loss(layer.w[:, j], s[j], z[j], w0[:, j], h) for j in range(layer.d_out)]


def cmd_quantize(args):
    cfg, workers = _settings(args)
    w0 = _read_matrix(args.weights, "weights")
    h = _read_hessian(args.hessian)
    if w0.shape[0] != h.dim:
        raise ValidationError(f"weights have {w0.shape[0]} rows but the Hessian is {h.dim}x{h.dim}")
    layer, report = quantize_layer(w0, h, cfg, workers=workers, fixed_sz=_fixed_sz(args))
    formats.write_quant(args.out, layer)
    stored = _stored_loss(w0, h, layer)
    report.totals["g_total_stored"] = float(sum(stored))
    report.totals["g_mean_stored"] = float(sum(stored)) / layer.d_out
    if args.report:
        formats.write_json(args.report, report.to_dict())
    print(f"g_init_total {report.totals['g_init_total']:.10g}")
    print(f"g_total {report.totals['g_total']:.10g}")
    flagged = report.totals["flagged_columns"]
    if flagged:
        log.error("columns failed the analytic (s, z) solve: %s", flagged)
        return 3
    return 0


def _eval_metrics(w0, layer, h, x):
    if layer.d_in != w0.shape[0] or layer.d_out != w0.shape[1]:
        raise ValidationError(
            f"quant layer is {layer.d_in}x{layer.d_out}, weights are {w0.shape[0]}x{w0.shape[1]}"
        )
    per = [layer_loss(layer.w[:, j], layer.scales[j], layer.zeros[j], w0[:, j], h) for j in range(layer.d_out)]
    out = {"g_total": float(sum(per)), "g_mean": float(sum(per)) / layer.d_out}
    if x is not None:
        ref = x @ w0
        denom = np.linalg.norm(ref)
        diff = np.linalg.norm(x @ layer.dequantize() - ref)
        out["relative_output_error"] = float(diff / denom) if denom > 0 else float(diff)
    return out


def cmd_eval(args):
    w0 = _read_matrix(args.weights, "weights")
    layer = formats.read_quant(args.quant)
    x = _read_matrix(args.activations, "activations") if args.activations else None
    if args.hessian:
        h = _read_hessian(args.hessian)
    elif x is not None:
        h = build_hessian(x, args.damping)
    else:
        raise ValidationError("eval needs --hessian or --activations")
    metrics = _eval_metrics(w0, layer, h, x)
    for k, v in metrics.items():
        print(f"{k} {v:.12g}")
    if args.json:
        formats.write_json(args.json, metrics)
    return 0


def _load_block(path):
    with open(path, "rb") as f:
        try:
            desc = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    required = ["ln_gain", "ln_bias", "fc1_weight", "fc2_weight", "fc1_quant", "fc2_quant"]
    missing = [k for k in required if k not in desc]
    if missing:
        raise ValidationError(f"{path}: missing keys {missing}")
    paths = {k: os.path.join(base, desc[k]) for k in required}
    gain, gain_code = formats.read_tensor(paths["ln_gain"], with_dtype=True)
    bias, bias_code = formats.read_tensor(paths["ln_bias"], with_dtype=True)
    spec = BlockSpec(
        formats.read_quant(paths["fc1_quant"]),
        formats.read_quant(paths["fc2_quant"]),
        desc.get("activation", "gelu"),
    )
    for key, want in (("d", spec.d), ("h", spec.h)):
        if key in desc and int(desc[key]) != want:
            raise ValidationError(f"{path}: {key}={desc[key]} but quant files imply {want}")
    return desc, paths, spec, (gain, gain_code), (bias, bias_code)


def cmd_block_finetune(args):
    desc, paths, spec, (gain, gain_code), (bias, bias_code) = _load_block(args.block)
    x = _read_matrix(args.calib, "calibration inputs")
    w1 = _read_matrix(paths["fc1_weight"], "fc1 weight")
    w2 = _read_matrix(paths["fc2_weight"], "fc2 weight")
    x_ref = _read_matrix(args.float_inputs, "float inputs") if args.float_inputs else x
    if x_ref.shape != x.shape:
        raise ValidationError("--float-inputs must match the calibration tensor's shape")
    y_ref = float_block_forward(x_ref, gain.ravel(), bias.ravel(), w1, w2, spec.activation)
    params = initial_params(spec, gain.ravel(), bias.ravel())
    best, rep = finetune_block(
        spec, params, x, y_ref, args.epochs, args.batch, args.lr, args.wd, args.seed
    )
    fc1, fc2 = updated_layers(spec, best)
    formats.write_quant(paths["fc1_quant"], fc1)
    formats.write_quant(paths["fc2_quant"], fc2)
    # keep the on-disk shape and dtype of the norm tensors
    formats.write_tensor(paths["ln_gain"], best["ln_gain"].reshape(gain.shape), gain_code)
    formats.write_tensor(paths["ln_bias"], best["ln_bias"].reshape(bias.shape), bias_code)
    out = rep.to_dict()
    # loss after the f32 round trip of the stored scales/zeros
    stored = {k: (formats.stored_f32(v) if k.startswith("fc") else v) for k, v in best.items()}
    out["final_loss_stored"] = block_loss(spec, stored, x, y_ref)
    if args.report:
        formats.write_json(args.report, out)
    print(f"initial_loss {rep.initial_loss:.10g}")
    print(f"final_loss {rep.final_loss:.10g}")
    return 0


def _columns(spec, d_out):
    if spec is None:
        return list(range(d_out))
    cols = [int(c) for c in spec.split(",")]
    bad = [c for c in cols if not 0 <= c < d_out]
    if bad:
        raise ValidationError(f"column indices {bad} out of range 0..{d_out - 1}")
    return cols


def cmd_oracle(args):
    cfg, _ = _settings(args)
    w0 = _read_matrix(args.weights, "weights")
    h = _read_hessian(args.hessian)
    fixed = _fixed_sz(args)
    rows = []
    for j in _columns(args.columns, w0.shape[1]):
        prob = ColumnProblem(w0[:, j], h, cfg, label=f"column {j}")
        res = exhaustive_solve(prob, args.budget, fixed_sz=fixed)
        sol = solve_column(prob, fixed)
        ratio = sol.g_final / res.g_opt if res.g_opt > 0 else (1.0 if sol.g_final == 0 else float("inf"))
        rows.append(
            {
                "column": j,
                "g_opt": res.g_opt,
                "w_opt": res.w_opt.tolist(),
                "s_opt": res.s_opt.tolist(),
                "z_opt": res.z_opt.tolist(),
                "candidates": res.candidates_evaluated,
                "g_solver": sol.g_final,
                "ratio": ratio,
            }
        )
        print(f"column {j}: g_opt {res.g_opt:.10g} g_solver {sol.g_final:.10g} ratio {ratio:.6g}")
    if args.json:
        formats.write_json(args.json, rows)
    return 0


def cmd_compare_approx(args):
    cfg, workers = _settings(args)
    w0 = _read_matrix(args.weights, "weights")
    h = _read_hessian(args.hessian)
    try:
        ks = [int(k) for k in args.k_sweep.split(",") if k.strip()]
    except ValueError as exc:
        raise ValidationError("--k-sweep expects comma-separated integers") from exc
    settings = [("level2", None)] + [("level1", k) for k in ks]
    rows = []
    for approx, k in settings:
        kw = {"approx": approx} if k is None else {"approx": approx, "inner_iters": k}
        c = QuantConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, **kw})
        _, rep = quantize_layer(w0, h, c, workers=workers)
        rows.append({"approx": approx, "k": "" if k is None else k, "g_total": repr(rep.totals["g_total"])})
        print(f"{approx:7s} k={'-' if k is None else k:>3} g_total {rep.totals['g_total']:.10g}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            wr = csv.DictWriter(f, fieldnames=["approx", "k", "g_total"])
            wr.writeheader()
            wr.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decoupleq",
        description="Weight-only 2/3/4-bit quantization with integer and affine parts solved separately.",
        epilog=FORMATS_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=FORMATS_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("hessian", cmd_hessian, "build a damped Hessian X^T X + lambda I from calibration inputs")
    p.add_argument("activations", help="tensor file, batch x d_in")
    p.add_argument("--damping", type=float, default=0.01, help="lambda as a fraction of mean(diag) (default 0.01)")
    p.add_argument("--out", required=True, help="output tensor file")

    p = add("quantize", cmd_quantize, "quantize a weight matrix column by column")
    p.add_argument("weights", help="tensor file, d_in x d_out")
    p.add_argument("hessian", help="tensor file, d_in x d_in")
    p.add_argument("--out", required=True, help="output quant file")
    p.add_argument("--report", help="output JSON report")
    _add_quant_flags(p)

    p = add("eval", cmd_eval, "layer loss and relative output error of a quantized layer")
    p.add_argument("weights", help="tensor file, d_in x d_out")
    p.add_argument("quant", help="quant file")
    p.add_argument("activations", nargs="?", help="tensor file, batch x d_in")
    p.add_argument("--hessian", help="Hessian tensor for the loss (else built from activations)")
    p.add_argument("--damping", type=float, default=0.01, help="damping when building from activations")
    p.add_argument("--json", help="also write the metrics as JSON")

    p = add("block-finetune", cmd_block_finetune, "fine-tune scales, zeros and norm parameters of a block")
    p.add_argument("block", help="TOML block description (d, h, activation, ln_gain, ln_bias, "
                   "fc1_weight, fc2_weight, fc1_quant, fc2_quant; paths relative to the file)")
    p.add_argument("calib", help="calibration inputs, n x d")
    p.add_argument("--float-inputs", help="inputs from the float model for the reference outputs "
                   "(default: the calibration inputs)")
    p.add_argument("--epochs", type=int, default=4, help="epochs (default 4)")
    p.add_argument("--lr", type=float, default=1e-5, help="Adam learning rate (default 1e-5)")
    p.add_argument("--wd", type=float, default=1e-6, help="decoupled weight decay (default 1e-6)")
    p.add_argument("--batch", type=int, default=32, help="minibatch rows (default 32)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed (default 0)")
    p.add_argument("--report", help="loss-curve JSON output")

    p = add("oracle", cmd_oracle, "exhaustive optimum per column, compared with the solver")
    p.add_argument("weights", help="tensor file, d_in x d_out (tiny d_in only)")
    p.add_argument("hessian", help="tensor file, d_in x d_in")
    p.add_argument("--columns", help="comma-separated column indices (default all)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="max candidates (default 2^20)")
    p.add_argument("--json", help="write per-column results as JSON")
    _add_quant_flags(p)

    p = add("compare-approx", cmd_compare_approx, "level2 once, level1 for each K; CSV of total loss")
    p.add_argument("weights", help="tensor file, d_in x d_out")
    p.add_argument("hessian", help="tensor file, d_in x d_in")
    p.add_argument("--k-sweep", default="1,2,4,8,20", help="comma-separated K values (default 1,2,4,8,20)")
    p.add_argument("--out", help="CSV output")
    _add_quant_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DecoupleQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
