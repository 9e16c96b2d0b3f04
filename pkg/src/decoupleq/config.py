from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from .errors import ValidationError


class ApproxLevel(str, enum.Enum):
    """How the free suffix is re-optimized after each rounding step."""

    LEVEL1 = "level1"  # box-constrained, projected gradient descent
    LEVEL2 = "level2"  # unconstrained, closed-form GPTQ-style update


def default_bounds(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QuantConfig:
    """Hyperparameters for the layer-wise solve.

    ``alpha``/``beta`` default to the symmetric grid [-2^(b-1), 2^(b-1)-1].
    ``rounds``, ``inner_iters`` and ``warmup_iters`` are the alternation
    count, the PGD iterations after each rounding step, and the PGD
    iterations run before the rounding loop (level1 only).
    """

    bits: int = 2
    alpha: int | None = None
    beta: int | None = None
    group_count: int = 1
    approx: ApproxLevel = ApproxLevel.LEVEL2
    rounds: int = 4
    inner_iters: int = 8
    warmup_iters: int = 50
    grid_points: int = 51
    p_min: float = 0.5
    p_max: float = 1.0
    per_group_p: bool = False
    damping_fraction: float = 0.01
    pgd_tolerance: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        lo, hi = default_bounds(self.bits) if self.bits in (2, 3, 4) else (None, None)
        if self.alpha is None:
            object.__setattr__(self, "alpha", lo)
        if self.beta is None:
            object.__setattr__(self, "beta", hi)
        object.__setattr__(self, "approx", ApproxLevel(self.approx))
        self.validate()

    def validate(self) -> None:
        if self.bits not in (2, 3, 4):
            raise ValidationError(f"bits must be 2, 3 or 4, got {self.bits}")
        if not self.alpha < self.beta:
            raise ValidationError(f"alpha ({self.alpha}) must be < beta ({self.beta})")
        if self.beta - self.alpha + 1 != 2**self.bits:
            raise ValidationError(
                f"[alpha, beta] = [{self.alpha}, {self.beta}] does not hold "
                f"exactly 2^{self.bits} levels"
            )
        if self.group_count < 1:
            raise ValidationError("group_count must be >= 1")
        for name in ("rounds", "inner_iters", "warmup_iters"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.grid_points < 2:
            raise ValidationError("grid_points must be >= 2")
        if not self.p_min <= self.p_max:
            raise ValidationError("p_min must be <= p_max")
        if self.damping_fraction < 0:
            raise ValidationError("damping_fraction must be >= 0")

    def check_layer(self, d_in: int) -> None:
        if d_in % self.group_count:
            raise ValidationError(
                f"group count {self.group_count} does not divide d_in={d_in}; "
                f"choose a divisor of {d_in}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["approx"] = self.approx.value
        return d
