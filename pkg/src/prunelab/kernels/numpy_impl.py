"""Pure-numpy convolution kernels (im2col + tensordot).

Cross-correlation convention, NCHW inputs, OIHW kernels. These are the
fallback path when the numba backend is disabled or unavailable; both
backends must agree to float64 rounding.
"""

import numpy as np


def _im2col(xp, kh, kw, stride, out_h, out_w):
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    shape = (n, c, kh, kw, out_h, out_w)
    strides = (s0, s1, s2, s3, s2 * stride, s3 * stride)
    return np.lib.stride_tricks.as_strided(xp, shape, strides, writeable=False)


def conv2d_forward(x, kern, stride, pad):
    n, c, h, w = x.shape
    o, ck, kh, kw = kern.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    # [n,c,kh,kw,oh,ow] x [o,c,kh,kw] -> [n,oh,ow,o]
    y = np.tensordot(cols, kern, axes=([1, 2, 3], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_grad_kernel(x, gy, kh, kw, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out_h, out_w = gy.shape[2], gy.shape[3]
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    # [n,o,oh,ow] x [n,c,kh,kw,oh,ow] -> [o,c,kh,kw]
    gk = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))
    return np.ascontiguousarray(gk)


def conv2d_grad_input(gy, kern, stride, pad, in_h, in_w):
    n = gy.shape[0]
    o, c, kh, kw = kern.shape
    out_h, out_w = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, c, in_h + 2 * pad, in_w + 2 * pad))
    # [n,o,oh,ow] x [o,c,kh,kw] -> [n,oh,ow,c,kh,kw]
    g = np.tensordot(gy, kern, axes=([1], [0]))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + in_h, pad:pad + in_w])
    return gxp
