"""Brute-force ground truth for tiny column problems.

Every integer vector in [alpha, beta]^d_in is enumerated. The best (s, z)
for each candidate is found by a batched SVD least-squares solve in the
H-weighted norm, deliberately a different route from the Cholesky normal
equations the solver uses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .layerwise import ColumnProblem, ColumnSolution, grid_search_init, layer_loss

DEFAULT_BUDGET = 2**20
_CHUNK = 1 << 14


@dataclass(eq=False)
class OracleResult:
    w_opt: np.ndarray
    s_opt: np.ndarray
    z_opt: np.ndarray
    g_opt: float
    candidates_evaluated: int


def _candidates(alpha, beta, d_in):
    levels = range(alpha, beta + 1)
    it = itertools.product(levels, repeat=d_in)
    while True:
        chunk = np.array(list(itertools.islice(it, _CHUNK)), dtype=np.float64)
        if chunk.size == 0:
            return
        yield chunk.reshape(-1, d_in)


def _h_root(h):
    # R with R^T R = H; eigen route tolerates PSD matrices without damping
    vals, vecs = np.linalg.eigh(h)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))).T


def exhaustive_solve(prob: ColumnProblem, budget: int = DEFAULT_BUDGET, fixed_sz=None) -> OracleResult:
    """Global optimum of the constrained column problem by full enumeration.

    With ``fixed_sz=(s, z)`` the affine part is pinned and only w is
    enumerated. Ties go to the lexicographically smallest w.
    """
    cfg = prob.cfg
    d, ng = prob.d_in, cfg.group_count
    n_levels = cfg.beta - cfg.alpha + 1
    required = n_levels**d
    if required > budget:
        raise ValidationError(
            f"exhaustive search needs {required} candidates, budget is {budget}"
        )
    h, b = prob.H.matrix, prob.b
    root = _h_root(h)
    rb = root @ b
    member = np.repeat(np.eye(ng), d // ng, axis=0)  # d x ng

    best_g, best = np.inf, None
    for cand in _candidates(cfg.alpha, cfg.beta, d):
        if fixed_sz is not None:
            s = np.broadcast_to(np.asarray(fixed_sz[0], float), (ng,))
            z = np.broadcast_to(np.asarray(fixed_sz[1], float), (ng,))
            r = cand * (member @ s) + member @ z - b
            g = 0.5 * np.einsum("ci,ij,cj->c", r, h, r)
            u = np.broadcast_to(np.concatenate([s, z]), (cand.shape[0], 2 * ng))
        else:
            a = np.concatenate(
                [cand[:, :, None] * member[None], np.broadcast_to(member, (cand.shape[0], d, ng))],
                axis=2,
            )  # c x d x 2ng
            m = np.einsum("ij,cjk->cik", root, a)
            uu, sv, vt = np.linalg.svd(m, full_matrices=False)
            cut = sv > 1e-10 * sv[:, :1]
            inv = np.where(cut, 1.0 / np.where(cut, sv, 1.0), 0.0)
            coef = np.einsum("cik,i->ck", uu, rb) * inv
            u = np.einsum("ckj,ck->cj", vt, coef)
            res = np.einsum("cik,ck->ci", m, u) - rb
            g = 0.5 * np.einsum("ci,ci->c", res, res)
        k = int(np.argmin(g))
        if g[k] < best_g:
            best_g = float(g[k])
            best = (cand[k].astype(np.int64), np.array(u[k, :ng]), np.array(u[k, ng:]))
    w, s, z = best
    return OracleResult(w, s, z, best_g, required)


def rtn_baseline(prob: ColumnProblem) -> ColumnSolution:
    """Grid-search round-to-nearest initialization only, no alternation."""
    s, z, w = grid_search_init(prob)
    g = layer_loss(w, s, z, prob.b, prob.H)
    return ColumnSolution(w=w, s=s, z=z, g_init=g, g_final=g)
