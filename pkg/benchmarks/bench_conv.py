"""Time the numba conv kernels against the pure-numpy im2col path.

Run:  python3 benchmarks/bench_conv.py
The active package backend is whatever PRUNELAB_BACKEND selects; this
script always times both implementations directly.
"""

import time

import numpy as np

from prunelab.kernels import numpy_impl
from prunelab.tensor import SeededRng

try:
    from prunelab.kernels import numba_impl
except ImportError:
    numba_impl = None


CASES = [
    ("desk 8x8", (16, 8, 8, 8), (8, 8, 3, 3)),
    ("mid 32x32", (8, 16, 32, 32), (16, 16, 3, 3)),
    ("wide 16x16", (4, 32, 16, 16), (64, 32, 3, 3)),
]


def _time(fn, *args, reps=20):
    fn(*args)  # warm-up (and JIT compile for numba)
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps


def main():
    rng = SeededRng(0)
    print(f"{'case':<12} {'op':<12} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, xshape, kshape in CASES:
        x = rng.stream(name + "x").normal(xshape)
        k = rng.stream(name + "k").normal(kshape)
        y = numpy_impl.conv2d_forward(x, k, 1, 1)
        gy = rng.stream(name + "g").normal(y.shape)
        ops = [
            ("forward", lambda impl: impl.conv2d_forward(x, k, 1, 1)),
            ("grad_kernel", lambda impl: impl.conv2d_grad_kernel(
                x, gy, kshape[2], kshape[3], 1, 1)),
            ("grad_input", lambda impl: impl.conv2d_grad_input(
                gy, k, 1, 1, xshape[2], xshape[3])),
        ]
        for op_name, op in ops:
            t_np = _time(lambda: op(numpy_impl))
            if numba_impl is None:
                print(f"{name:<12} {op_name:<12} {t_np*1e3:>8.2f}ms {'n/a':>10}")
                continue
            t_nb = _time(lambda: op(numba_impl))
            print(f"{name:<12} {op_name:<12} {t_np*1e3:>8.2f}ms "
                  f"{t_nb*1e3:>8.2f}ms {t_np/t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
