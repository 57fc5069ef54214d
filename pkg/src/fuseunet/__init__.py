"""Multi-encoder max-fusion segmentation network with dynamic patch resampling."""

from .tensor import (
    Tape,
    Tensor,
    backward,
    conv2d,
    conv_transpose2d,
    finite_diff_check,
    no_grad,
    parameter,
)

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "conv2d",
    "conv_transpose2d",
    "finite_diff_check",
    "no_grad",
    "parameter",
    "__version__",
]
