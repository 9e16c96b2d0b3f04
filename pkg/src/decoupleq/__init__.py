"""Weight-only post-training quantization by decoupling integer and affine parts."""

from .config import ApproxLevel, QuantConfig
from .errors import DecoupleQError, FormatError, SingularSystemError, ValidationError
from .layerwise import (
    ColumnProblem,
    ColumnSolution,
    QuantizedLayer,
    SolveReport,
    dequantize,
    grid_search_init,
    group_expand,
    layer_loss,
    pgd_box_minimize,
    quantize_layer,
    rtn_quantize,
    solve_column,
    solve_sz,
    solve_w,
)
from .linalg import Hessian, HessianAccumulator, build_hessian, solve_spd, spectral_upper_bound

__version__ = "0.1.0"
