from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (
    NonFiniteError,
    ShapeError,
    conv1d_out_len,
    conv_transpose1d_out_len,
    kl_diag_gaussian,
    op_catalog,
)
from .optim import MissingGradError, OptimizerState, ParamStore, adam_step
from .rng import Stream

__all__ = [
    "GradCheckReport",
    "MissingGradError",
    "NonFiniteError",
    "OptimizerState",
    "ParamStore",
    "ShapeError",
    "Stream",
    "adam_step",
    "conv1d_out_len",
    "conv_transpose1d_out_len",
    "grad_check",
    "kl_diag_gaussian",
    "op_catalog",
    "relative_error",
]
