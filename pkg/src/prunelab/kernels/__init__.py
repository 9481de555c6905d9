"""Backend dispatch for the hot convolution kernels.

Two interchangeable implementations: pure-numpy im2col (BLAS-backed) and
numba @njit loop kernels. The active backend is chosen once at import
time from the environment:

    PRUNELAB_BACKEND=numpy   im2col kernels (the default)
    PRUNELAB_BACKEND=numba   numba JIT kernels (error if numba missing)
    unset / auto             numpy

``benchmarks/bench_conv.py`` times the two against each other; on the
hosts measured so far the BLAS-backed path wins at every relevant size,
hence the default.
"""

import os

from . import numpy_impl

_requested = os.environ.get("PRUNELAB_BACKEND", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"PRUNELAB_BACKEND must be auto|numba|numpy, got {_requested!r}")

if _requested == "numba":
    from . import numba_impl as _impl
    _backend = "numba"
else:
    _impl = numpy_impl
    _backend = "numpy"


def backend_name():
    return _backend


def conv2d_forward(x, kern, stride, pad):
    return _impl.conv2d_forward(x, kern, stride, pad)


def conv2d_grad_kernel(x, gy, kh, kw, stride, pad):
    return _impl.conv2d_grad_kernel(x, gy, kh, kw, stride, pad)


def conv2d_grad_input(gy, kern, stride, pad, in_h, in_w):
    return _impl.conv2d_grad_input(gy, kern, stride, pad, in_h, in_w)
