"""Layer-wise minimization: integer grid part and affine (scale, zero) part.

For one output column ``b`` of a weight matrix the solver minimizes

    g(w; s, z) = 1/2 (s*w + z - b)^T H (s*w + z - b)

over integer ``w`` in [alpha, beta] and unconstrained per-group ``s, z``,
alternating an exact least-squares solve for (s, z) with a sequential
round-and-reoptimize pass over ``w``. Columns are independent.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .config import ApproxLevel, QuantConfig
from .errors import SingularSystemError, ValidationError
from .linalg import Hessian, as_matrix, solve_spd, spectral_upper_bound

DEGENERATE_SCALE = 1e-12


def group_expand(v, d_in: int) -> np.ndarray:
    """Repeat each group's value over its contiguous block of input rows."""
    v = np.asarray(v, dtype=np.float64)
    ng = v.shape[-1]
    if ng == 0 or d_in % ng:
        raise ValidationError(f"{ng} groups do not divide d_in={d_in}")
    return np.repeat(v, d_in // ng, axis=-1)


def _hmat(h) -> np.ndarray:
    return h.matrix if isinstance(h, Hessian) else np.asarray(h, dtype=np.float64)


def layer_loss(w, s, z, b, h) -> float:
    """Quadratic layer objective 1/2 r^T H r with r = s*w + z - b (broadcast by group)."""
    b = np.asarray(b, dtype=np.float64)
    r = dequantize(w, s, z) - b
    return max(0.5 * float(r @ _hmat(h) @ r), 0.0)


def dequantize(w, s, z) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    d_in = w.shape[-1]
    return group_expand(s, d_in) * w + group_expand(z, d_in)


def degenerate_mask(scale) -> np.ndarray:
    """True where |s| is negligible relative to the largest |s| (all True if s == 0)."""
    a = np.abs(np.asarray(scale, dtype=np.float64))
    return a <= DEGENERATE_SCALE * np.max(a, axis=-1, keepdims=True)


def _rtn(b, s_exp, z_exp, alpha, beta):
    # operates on already-expanded scales; broadcasts over leading axes
    degen = degenerate_mask(s_exp)
    safe = np.where(degen, 1.0, s_exp)
    with np.errstate(over="ignore"):  # huge quotients clip to the bounds
        w = np.clip(np.rint((b - z_exp) / safe), alpha, beta)
    w[degen] = np.clip(0, alpha, beta)
    return w.astype(np.int64)


def rtn_quantize(b, s, z, alpha: int, beta: int) -> np.ndarray:
    """clip(round_half_even((b - z) / s), alpha, beta); degenerate-scale coordinates map to 0."""
    b = np.asarray(b, dtype=np.float64)
    d_in = b.shape[-1]
    return _rtn(b, group_expand(s, d_in), group_expand(z, d_in), alpha, beta)


@dataclass(eq=False)
class ColumnProblem:
    b: np.ndarray
    H: Hessian
    cfg: QuantConfig
    label: str = "column"

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if not isinstance(self.H, Hessian):
            self.H = Hessian.from_matrix(self.H)
        if self.b.ndim != 1 or self.b.shape[0] != self.H.dim:
            raise ValidationError(
                f"{self.label}: column length {self.b.shape} does not match Hessian dim {self.H.dim}"
            )
        self.cfg.check_layer(self.b.shape[0])

    @property
    def d_in(self) -> int:
        return self.b.shape[0]

    @property
    def group_size(self) -> int:
        return self.d_in // self.cfg.group_count


@dataclass(eq=False)
class ColumnSolution:
    w: np.ndarray
    s: np.ndarray
    z: np.ndarray
    g_init: float
    g_final: float
    g_trajectory: list[float] = field(default_factory=list)
    half_steps: list[float] = field(default_factory=list)
    ridge_events: list[float] = field(default_factory=list)
    flag: str | None = None

    def summary(self) -> dict:
        return {
            "g_init": self.g_init,
            "g_trajectory": list(self.g_trajectory),
            "g_final": self.g_final,
            "ridge_events": list(self.ridge_events),
            "flag": self.flag,
        }


class SZFit(NamedTuple):
    s: np.ndarray
    z: np.ndarray
    ridge: float


def _group_bounds(b, ng):
    bg = b.reshape(ng, -1)
    return bg.min(axis=1), bg.max(axis=1)


def grid_search_init(prob: ColumnProblem):
    """Initial (s, z, w) from a scan over the range-shrink factor p.

    For each candidate p every group gets s = p (b_max - b_min) / (beta - alpha)
    and z = p b_min - s alpha from its own slice of b; the candidate with the
    lowest full coupled objective wins (first index on ties). With
    ``cfg.per_group_p`` each group instead picks its own p against its
    diagonal block of H.
    """
    cfg = prob.cfg
    b, h, ng = prob.b, prob.H.matrix, cfg.group_count
    bmin, bmax = _group_bounds(b, ng)
    p = np.linspace(cfg.p_min, cfg.p_max, cfg.grid_points)
    s = p[:, None] * (bmax - bmin)[None, :] / (cfg.beta - cfg.alpha)
    z = p[:, None] * bmin[None, :] - s * cfg.alpha
    s_exp, z_exp = group_expand(s, prob.d_in), group_expand(z, prob.d_in)
    w = _rtn(b[None, :], s_exp, z_exp, cfg.alpha, cfg.beta)
    r = s_exp * w + z_exp - b[None, :]
    if not cfg.per_group_p:
        losses = 0.5 * np.einsum("pi,ij,pj->p", r, h, r)
        k = int(np.argmin(losses))
        return s[k].copy(), z[k].copy(), w[k].copy()
    gs = prob.group_size
    pick = np.empty(ng, dtype=np.int64)
    for g in range(ng):
        sl = slice(g * gs, (g + 1) * gs)
        rg = r[:, sl]
        pick[g] = np.argmin(0.5 * np.einsum("pi,ij,pj->p", rg, h[sl, sl], rg))
    cols = np.arange(ng)
    s0, z0 = s[pick, cols], z[pick, cols]
    return s0, z0, rtn_quantize(b, s0, z0, cfg.alpha, cfg.beta)


def design_matrix(w, ng: int) -> np.ndarray:
    """d_in x 2ng matrix [w on group g's rows | ones on group g's rows]."""
    w = np.asarray(w, dtype=np.float64)
    d_in = w.shape[0]
    member = np.repeat(np.eye(ng), d_in // ng, axis=0)
    return np.hstack([member * w[:, None], member])


def solve_sz(w, prob: ColumnProblem) -> SZFit:
    """Exact minimizer of g over (s, z) for fixed integers w (normal equations)."""
    ng = prob.cfg.group_count
    a = design_matrix(w, ng)
    ha = prob.H.matrix @ a
    normal = a.T @ ha
    normal = 0.5 * (normal + normal.T)
    rhs = ha.T @ prob.b
    sol = solve_spd(normal, rhs, label=f"{prob.label} (scale/zero fit, {ng} group(s))")
    return SZFit(sol.x[:ng].copy(), sol.x[ng:].copy(), sol.ridge)


def box_qp_objective(hq, linear_term, x) -> float:
    return 0.5 * float(x @ hq @ x) + float(linear_term @ x)


def pgd_box_minimize(
    hq,
    linear_term,
    x0,
    lo,
    hi,
    fixed_mask=None,
    iters: int = 100,
    tol: float = 1e-7,
    lipschitz: float | None = None,
    seed: int = 0,
    record: list | None = None,
) -> np.ndarray:
    """Projected gradient descent on 1/2 x^T Hq x + c^T x over the box [lo, hi].

    Only coordinates not in ``fixed_mask`` move. Step size is 1/L with L an
    upper bound on the spectrum of the full ``hq``. Stops after ``iters``
    steps or once the gradient mapping's infinity norm drops below ``tol``.
    Objective values (initial, then after each step) are appended to
    ``record`` when given.
    """
    hq = np.asarray(hq, dtype=np.float64)
    c = np.asarray(linear_term, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    free = np.ones(x.shape, bool) if fixed_mask is None else ~np.asarray(fixed_mask, bool)
    if record is not None:
        record.append(box_qp_objective(hq, c, x))
    if not free.any() or iters <= 0:
        return x
    L = spectral_upper_bound(hq, seed=seed) if lipschitz is None else lipschitz
    for _ in range(iters):
        grad = hq @ x + c
        y = np.clip(x[free] - grad[free] / L, lo, hi)
        if L * np.max(np.abs(x[free] - y)) < tol:
            break
        x[free] = y
        if record is not None:
            record.append(box_qp_objective(hq, c, x))
    return x


def _level2_factor(prob: ColumnProblem, keep: np.ndarray) -> np.ndarray:
    if keep.all():
        return prob.H.inverse_upper_factor
    # degenerate coordinates leave the system; the reduced block needs its own factor
    sub = prob.H.matrix[np.ix_(keep, keep)]
    c = scipy.linalg.cho_factor(sub, lower=True)
    hinv = scipy.linalg.cho_solve(c, np.eye(sub.shape[0]))
    return scipy.linalg.cholesky(0.5 * (hinv + hinv.T), lower=False)


def solve_w(prob: ColumnProblem, s, z, w_start=None, record: list | None = None) -> np.ndarray:
    """Sequential round-and-clip over w with (s, z) frozen.

    level1: M warm-up PGD steps on the box relaxation, then for each j in
    index order round w_j, freeze it and run K PGD steps on the free suffix.
    level2: start from the unconstrained optimum (b - z)/s and after rounding
    each w_j apply the closed-form compensation to the suffix using the
    shared inverse factor of H rescaled by the scales.
    """
    cfg = prob.cfg
    d = prob.d_in
    s_exp = group_expand(s, d)
    z_exp = group_expand(z, d)
    degen = degenerate_mask(s_exp)
    keep = ~degen
    lo, hi = cfg.alpha, cfg.beta

    if cfg.approx is ApproxLevel.LEVEL2:
        x = np.zeros(d)
        idx = np.flatnonzero(keep)
        if idx.size:
            u = _level2_factor(prob, keep)
            sk = s_exp[idx]
            xs = (prob.b[idx] - z_exp[idx]) / sk
            for j in range(idx.size):
                q = float(np.clip(np.rint(xs[j]), lo, hi))
                err = (xs[j] - q) * sk[j] / u[j, j]
                xs[j + 1 :] -= err * u[j, j + 1 :] / sk[j + 1 :]
                xs[j] = q
            x[idx] = xs
        x[degen] = np.clip(0, lo, hi)
        return x.astype(np.int64)

    h = prob.H.matrix
    hq = s_exp[:, None] * h * s_exp[None, :]
    lin = s_exp * (h @ (z_exp - prob.b))
    if w_start is None:
        x = np.clip((prob.b - z_exp) / np.where(degen, 1.0, s_exp), lo, hi)
    else:
        x = np.clip(np.asarray(w_start, dtype=np.float64), lo, hi)
    x[degen] = np.clip(0, lo, hi)
    L = spectral_upper_bound(hq, seed=cfg.seed)
    fixed = degen.copy()
    x = pgd_box_minimize(
        hq, lin, x, lo, hi, fixed, cfg.warmup_iters, cfg.pgd_tolerance, L, record=record
    )
    for j in range(d):
        if fixed[j]:
            continue
        x[j] = np.clip(np.rint(x[j]), lo, hi)
        fixed[j] = True
        if cfg.inner_iters and not fixed.all():
            x = pgd_box_minimize(
                hq, lin, x, lo, hi, fixed, cfg.inner_iters, cfg.pgd_tolerance, L, record=record
            )
    return x.astype(np.int64)


def solve_column(prob: ColumnProblem, fixed_sz=None) -> ColumnSolution:
    """Alternate w and (s, z) solves for ``cfg.rounds`` rounds; return the best iterate seen.

    ``fixed_sz=(s, z)`` replaces the grid-search init by the given values and
    keeps them pinned, so only the integer half-step runs.
    """
    cfg = prob.cfg
    if fixed_sz is None:
        s, z, w = grid_search_init(prob)
    else:
        ng = cfg.group_count
        s = np.broadcast_to(np.asarray(fixed_sz[0], dtype=np.float64), (ng,)).copy()
        z = np.broadcast_to(np.asarray(fixed_sz[1], dtype=np.float64), (ng,)).copy()
        w = rtn_quantize(prob.b, s, z, cfg.alpha, cfg.beta)

    g0 = layer_loss(w, s, z, prob.b, prob.H)
    best = (w, s, z, g0)
    half_steps, trajectory, ridges = [g0], [], []
    flag = None

    def consider(g):
        nonlocal best
        if g < best[3]:
            best = (w.copy(), s.copy(), z.copy(), g)

    for _ in range(cfg.rounds):
        w = solve_w(prob, s, z, w)
        g = layer_loss(w, s, z, prob.b, prob.H)
        half_steps.append(g)
        consider(g)
        if fixed_sz is None:
            try:
                s, z, ridge = solve_sz(w, prob)
            except SingularSystemError as exc:
                flag = str(exc)
                trajectory.append(g)
                break
            if ridge:
                ridges.append(ridge)
            g = layer_loss(w, s, z, prob.b, prob.H)
            half_steps.append(g)
            consider(g)
        trajectory.append(g)

    w, s, z, _ = best
    return ColumnSolution(
        w=w,
        s=s,
        z=z,
        g_init=g0,
        g_final=layer_loss(w, s, z, prob.b, prob.H),
        g_trajectory=trajectory,
        half_steps=half_steps,
        ridge_events=ridges,
        flag=flag,
    )


@dataclass(eq=False)
class QuantizedLayer:
    """Integer codes (d_in x d_out, values in [alpha, beta]) plus per-column-per-group s, z."""

    w: np.ndarray
    scales: np.ndarray  # d_out x ng
    zeros: np.ndarray  # d_out x ng
    bits: int
    alpha: int
    beta: int

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    @property
    def group_count(self) -> int:
        return self.scales.shape[1]

    def dequantize(self, scales=None, zeros=None) -> np.ndarray:
        """Dense d_in x d_out weight s[j, group(i)] * w[i, j] + z[j, group(i)]."""
        s = self.scales if scales is None else scales
        z = self.zeros if zeros is None else zeros
        return group_expand(s, self.d_in).T * self.w + group_expand(z, self.d_in).T

    def with_params(self, scales, zeros) -> "QuantizedLayer":
        return QuantizedLayer(self.w, np.array(scales, float), np.array(zeros, float),
                              self.bits, self.alpha, self.beta)


@dataclass
class SolveReport:
    config: dict
    per_column: list[dict]
    totals: dict
    timings: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "per_column": self.per_column,
            "totals": self.totals,
            "timings": self.timings,
        }


def quantize_layer(w0, H: Hessian, cfg: QuantConfig, workers: int = 1, fixed_sz=None):
    """Quantize every column of ``w0`` (d_in x d_out) independently.

    Output is identical for any ``workers`` count: columns share nothing but
    the read-only Hessian (and its cached inverse factor, built up front).
    """
    w0 = as_matrix(w0, "weights")
    if not isinstance(H, Hessian):
        H = Hessian.from_matrix(H)
    d_in, d_out = w0.shape
    if d_in != H.dim:
        raise ValidationError(f"weights have {d_in} rows but Hessian dim is {H.dim}")
    cfg.check_layer(d_in)
    if cfg.approx is ApproxLevel.LEVEL2:
        H.inverse_upper_factor  # noqa: B018 - build once before fan-out

    def run(j):
        return solve_column(ColumnProblem(w0[:, j], H, cfg, label=f"column {j}"), fixed_sz)

    t0 = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sols = list(pool.map(run, range(d_out)))
    else:
        sols = [run(j) for j in range(d_out)]
    elapsed = time.perf_counter() - t0

    layer = QuantizedLayer(
        w=np.stack([c.w for c in sols], axis=1).astype(np.int64),
        scales=np.stack([c.s for c in sols]),
        zeros=np.stack([c.z for c in sols]),
        bits=cfg.bits,
        alpha=cfg.alpha,
        beta=cfg.beta,
    )
    g_total = 0.0
    for c in sols:
        g_total += c.g_final
    report = SolveReport(
        config=cfg.to_dict(),
        per_column=[c.summary() for c in sols],
        totals={
            "g_total": g_total,
            "g_init_total": float(sum(c.g_init for c in sols)),
            "g_mean": g_total / d_out,
            "flagged_columns": [j for j, c in enumerate(sols) if c.flag],
        },
        timings={"solve_seconds": elapsed, "workers": workers},
    )
    return layer, report
