"""Convolution kernel backends.

The three hot kernels (conv forward, gradient w.r.t. input, gradient
w.r.t. weight) exist twice: a numba @njit implementation and a pure-numpy
im2col implementation. Selection order:

    FUSEUNET_KERNELS=numpy   force the numpy path
    FUSEUNET_KERNELS=numba   force numba (error if unimportable)
    unset                    numba when importable, else numpy

Both backends share the same NCHW signatures and are exercised against
each other and against a nested-loop oracle in the test suite. All
parallel numba loops write disjoint output slices, so results are
bit-stable for any thread count.
"""

from __future__ import annotations

import os

from ..errors import ConfigError

_requested = os.environ.get("FUSEUNET_KERNELS", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ConfigError(
        f"FUSEUNET_KERNELS must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import numpy_backend as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise ConfigError("FUSEUNET_KERNELS=numba but numba is not importable")
        from . import numpy_backend as _impl

        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight


def backend_name() -> str:
    return BACKEND
