"""Dense linear algebra: Hessian construction, SPD solves, spectral bounds.

Matrices are plain float64 numpy arrays. ``as_matrix`` is the single entry
point that validates external payloads (shape, finiteness) and upconverts
to 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import SingularSystemError, ValidationError

RIDGE_START = 1e-10
RIDGE_MAX = 1e-4
# Cholesky pivots below this fraction of the largest pivot (squared) are
# treated as a failed factorization.
PIVOT_RCOND = 1e-13


def as_matrix(x, name="tensor") -> np.ndarray:
    a = np.array(x, dtype=np.float64, copy=True)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-D array, got {a.ndim}-D")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name}: contains NaN or Inf")
    return np.ascontiguousarray(a)


@dataclass(frozen=True, eq=False)
class Hessian:
    """Damped Gram matrix ``X^T X + lambda I`` of a layer's calibration inputs."""

    matrix: np.ndarray
    damping_lambda: float = 0.0
    source_rows: int = 0

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"Hessian must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("Hessian contains NaN or Inf")
        scale = max(float(np.max(np.abs(m), initial=0.0)), 1e-300)
        if np.max(np.abs(m - m.T), initial=0.0) > 1e-12 * scale:
            raise ValidationError("Hessian is not symmetric")

    @classmethod
    def from_matrix(cls, matrix, damping_lambda=0.0, source_rows=0) -> "Hessian":
        """Wrap an explicit symmetric matrix (symmetrized exactly)."""
        m = as_matrix(matrix, "hessian")
        return cls(0.5 * (m + m.T), float(damping_lambda), int(source_rows))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def usable(self) -> bool:
        return bool(np.all(np.diag(self.matrix) > 0))

    @cached_property
    def inverse_upper_factor(self) -> np.ndarray:
        """Upper-triangular U with U^T U = H^-1, shared by every column solve."""
        try:
            c = scipy.linalg.cho_factor(self.matrix, lower=True)
            hinv = scipy.linalg.cho_solve(c, np.eye(self.dim))
            hinv = 0.5 * (hinv + hinv.T)
            return scipy.linalg.cholesky(hinv, lower=False)
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(
                "Hessian is not positive definite; increase damping"
            ) from exc


@dataclass
class HessianAccumulator:
    """Sums per-batch X^T X so large calibration sets can be streamed."""

    dim: int
    gram: np.ndarray = field(init=False)
    rows: int = field(init=False, default=0)

    def __post_init__(self):
        self.gram = np.zeros((self.dim, self.dim))

    def add(self, x) -> None:
        x = as_matrix(x, "activations")
        if x.shape[1] != self.dim:
            raise ValidationError(
                f"activation batch has {x.shape[1]} columns, expected {self.dim}"
            )
        self.gram += x.T @ x
        self.rows += x.shape[0]

    def finalize(self, damping_fraction=0.01) -> Hessian:
        if self.rows == 0:
            raise ValidationError("empty calibration set")
        return _damped(self.gram, damping_fraction, self.rows)


def build_hessian(x, damping_fraction=0.01) -> Hessian:
    """H = X^T X + lambda I with lambda = damping_fraction * mean(diag(X^T X))."""
    x = as_matrix(x, "activations")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise ValidationError("empty calibration set")
    return _damped(x.T @ x, damping_fraction, x.shape[0])


def _damped(gram, damping_fraction, rows) -> Hessian:
    if damping_fraction < 0:
        raise ValidationError("damping_fraction must be >= 0")
    gram = 0.5 * (gram + gram.T)
    lam = float(damping_fraction) * float(np.mean(np.diag(gram)))
    h = gram + lam * np.eye(gram.shape[0])
    if not np.all(np.diag(h) > 0):
        raise ValidationError(
            "Hessian has a zero diagonal entry and is unusable for solving "
            "(all-zero calibration inputs or damping 0)"
        )
    return Hessian(h, lam, rows)


@dataclass
class SPDSolution:
    x: np.ndarray
    ridge: float  # absolute value added to the diagonal, 0 if none


def _try_cholesky(a):
    try:
        c, low = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    piv = np.abs(np.diag(c))
    if piv.min() ** 2 < PIVOT_RCOND * piv.max() ** 2:
        return None
    return c, low


def solve_spd(a, b, label="system") -> SPDSolution:
    """Solve A X = B for symmetric A via Cholesky, escalating a ridge if needed.

    The ridge starts at 1e-10 * mean(diag A) and grows by x10 up to
    1e-4 * mean(diag A). ``label`` names the offending column/group in the
    error raised when even the largest ridge fails.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"{label}: matrix must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValidationError(
            f"{label}: right-hand side has {b.shape[0]} rows, expected {a.shape[0]}"
        )
    fac = _try_cholesky(a)
    if fac is not None:
        return SPDSolution(scipy.linalg.cho_solve(fac, b), 0.0)
    base = float(np.mean(np.diag(a)))
    if base > 0:
        rel = RIDGE_START
        while rel <= RIDGE_MAX * (1 + 1e-9):
            ridge = rel * base
            fac = _try_cholesky(a + ridge * np.eye(a.shape[0]))
            if fac is not None:
                return SPDSolution(scipy.linalg.cho_solve(fac, b), ridge)
            rel *= 10
    raise SingularSystemError(f"{label}: singular after maximum ridge")


def gershgorin_bound(a) -> float:
    return float(np.max(np.sum(np.abs(a), axis=1), initial=0.0))


def spectral_upper_bound(a, seed=0, iters=50, safety=1.01) -> float:
    """Upper bound on the largest eigenvalue of a symmetric PSD matrix.

    Power iteration from a seeded start vector, inflated by ``safety`` and
    capped by the Gershgorin row-sum bound (itself always valid). Falls back
    to Gershgorin when the iteration fails to grow; floors at 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    gersh = gershgorin_bound(a)
    if n == 0:
        return 1e-12
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        av = a @ v
        nrm = np.linalg.norm(av)
        if not np.isfinite(nrm) or nrm == 0.0:
            break
        v = av / nrm
        est = float(v @ (a @ v))
    if not np.isfinite(est) or est <= 0.0:
        bound = gersh
    else:
        bound = min(safety * est, gersh) if gersh > 0 else safety * est
    return max(bound, 1e-12)
