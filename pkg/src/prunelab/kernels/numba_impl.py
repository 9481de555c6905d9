"""Numba-compiled convolution kernels.

Row-streaming loop order with a unit-stride fast path (stride == 1) that
LLVM can vectorize. Accumulation order is fixed, so results are
reproducible run to run. Compiled lazily on first call; cache=True keeps
compiled artifacts across processes.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _ox_range(out_w, stride, off, w):
    lo = 0
    while lo < out_w and lo * stride + off < 0:
        lo += 1
    hi = out_w
    while hi > lo and (hi - 1) * stride + off >= w:
        hi -= 1
    return lo, hi


@njit(cache=True)
def conv2d_forward(x, kern, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = kern.shape
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((n, o, out_h, out_w))
    for b in range(n):
        for oc in range(o):
            for ic in range(c):
                for i in range(kh):
                    for j in range(kw):
                        kv = kern[oc, ic, i, j]
                        off = j - pad
                        for oy in range(out_h):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            lo, hi = _ox_range(out_w, stride, off, w)
                            yrow = y[b, oc, oy]
                            xrow = x[b, ic, iy]
                            if stride == 1:
                                for ox in range(lo, hi):
                                    yrow[ox] += kv * xrow[ox + off]
                            else:
                                for ox in range(lo, hi):
                                    yrow[ox] += kv * xrow[ox * stride + off]
    return y


@njit(cache=True)
def conv2d_grad_kernel(x, gy, kh, kw, stride, pad):
    n, c, h, w = x.shape
    o = gy.shape[1]
    out_h, out_w = gy.shape[2], gy.shape[3]
    gk = np.zeros((o, c, kh, kw))
    for b in range(n):
        for oc in range(o):
            for ic in range(c):
                for i in range(kh):
                    for j in range(kw):
                        off = j - pad
                        acc = 0.0
                        for oy in range(out_h):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            lo, hi = _ox_range(out_w, stride, off, w)
                            grow = gy[b, oc, oy]
                            xrow = x[b, ic, iy]
                            if stride == 1:
                                for ox in range(lo, hi):
                                    acc += grow[ox] * xrow[ox + off]
                            else:
                                for ox in range(lo, hi):
                                    acc += grow[ox] * xrow[ox * stride + off]
                        gk[oc, ic, i, j] += acc
    return gk


@njit(cache=True)
def conv2d_grad_input(gy, kern, stride, pad, in_h, in_w):
    n = gy.shape[0]
    o, c, kh, kw = kern.shape
    out_h, out_w = gy.shape[2], gy.shape[3]
    gx = np.zeros((n, c, in_h, in_w))
    for b in range(n):
        for oc in range(o):
            for ic in range(c):
                for i in range(kh):
                    for j in range(kw):
                        kv = kern[oc, ic, i, j]
                        off = j - pad
                        for oy in range(out_h):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= in_h:
                                continue
                            lo, hi = _ox_range(out_w, stride, off, in_w)
                            grow = gy[b, oc, oy]
                            xrow = gx[b, ic, iy]
                            if stride == 1:
                                for ox in range(lo, hi):
                                    xrow[ox + off] += kv * grow[ox]
                            else:
                                for ox in range(lo, hi):
                                    xrow[ox * stride + off] += kv * grow[ox]
    return gx
