from .core import NumericError, Tape, TapeError, Tensor, no_grad, set_check_finite
from .gradcheck import GradCheckResult, finite_diff_check
from .ops import (
    add,
    add_n,
    batchnorm,
    concat_channels,
    conv2d,
    gather_rows,
    l1_loss,
    l2_normalize_channel,
    matmul,
    maxpool2x2,
    mean_all,
    mul,
    mul_broadcast,
    relu,
    reshape,
    rowwise_max_argmax,
    scale,
    sub,
    sum_all,
    transpose,
    upsample2x,
    weighted_cross_entropy,
)
from .serialize import read_tensor, write_tensor

__all__ = [
    "NumericError", "Tape", "TapeError", "Tensor", "no_grad", "set_check_finite",
    "GradCheckResult", "finite_diff_check",
    "add", "add_n", "batchnorm", "concat_channels", "conv2d", "gather_rows", "l1_loss",
    "l2_normalize_channel", "matmul", "maxpool2x2", "mean_all", "mul", "mul_broadcast",
    "relu", "reshape", "rowwise_max_argmax", "scale", "sub", "sum_all", "transpose",
    "upsample2x", "weighted_cross_entropy", "read_tensor", "write_tensor",
]
