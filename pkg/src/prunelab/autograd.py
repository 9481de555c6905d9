"""Reverse-mode automatic differentiation over recorded numpy computations.

A forward pass builds a graph of :class:`Var` nodes (the tape); each node
records its parents and a closure that routes the output gradient back to
them. ``backward`` topologically orders the tape and produces exact
first-order gradients for any set of leaf variables.

Second-order quantities are never taken by differentiating twice. They
come from central finite differences of exact gradients
(:func:`directional_second_derivative`), which is exact on quadratics and
keeps the tape single-level.

ReLU uses subgradient 0 at the kink.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class LeafId:
    """Handle for a differentiable leaf: a weight array or a gate vector."""
    name: str
    role: str  # "weight" | "mask"


@dataclass
class FdConfig:
    """Step-size policy for finite-difference second derivatives."""
    eps_base: float = 1e-4
    scheme: str = "central"

    def __post_init__(self):
        if self.eps_base <= 0:
            raise ValueError("eps_base must be positive")


class Var:
    """One tape node: value, accumulated gradient, parent links."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul_const(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Var(shape={self.data.shape})"


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _accum(v, g):
    g = _unbroadcast(np.asarray(g), v.data.shape)
    if v.grad is None:
        v.grad = np.zeros(v.data.shape)
    v.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data + b.data, (a, b))

    def back(g):
        _accum(a, g)
        _accum(b, g)
    out._backward = back
    return out


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data * b.data, (a, b))

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    out._backward = back
    return out


def mul_const(a, c):
    a = as_var(a)
    c = float(c)
    out = Var(a.data * c, (a,))

    def back(g):
        _accum(a, g * c)
    out._backward = back
    return out


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data @ b.data, (a, b))

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    out._backward = back
    return out


def conv2d(x, kern, stride=1, pad=0):
    x, kern = as_var(x), as_var(kern)
    out = Var(kernels.conv2d_forward(x.data, kern.data, stride, pad), (x, kern))
    kh, kw = kern.data.shape[2], kern.data.shape[3]
    in_h, in_w = x.data.shape[2], x.data.shape[3]

    def back(g):
        g = np.ascontiguousarray(g)
        _accum(x, kernels.conv2d_grad_input(g, kern.data, stride, pad, in_h, in_w))
        _accum(kern, kernels.conv2d_grad_kernel(x.data, g, kh, kw, stride, pad))
    out._backward = back
    return out


def relu(a):
    a = as_var(a)
    out = Var(np.maximum(a.data, 0.0), (a,))
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)
    out._backward = back
    return out


def vsum(a):
    a = as_var(a)
    out = Var(a.data.sum(), (a,))

    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape))
    out._backward = back
    return out


def vmean(a):
    a = as_var(a)
    n = a.data.size
    out = Var(a.data.mean(), (a,))

    def back(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))
    out._backward = back
    return out


def reshape(a, shape):
    a = as_var(a)
    out = Var(a.data.reshape(shape), (a,))

    def back(g):
        _accum(a, g.reshape(a.data.shape))
    out._backward = back
    return out


def mean_spatial(a):
    """Global average pool: [N,C,H,W] -> [N,C]."""
    a = as_var(a)
    n_spatial = a.data.shape[2] * a.data.shape[3]
    out = Var(a.data.mean(axis=(2, 3)), (a,))

    def back(g):
        _accum(a, g[:, :, None, None] * np.full(a.data.shape, 1.0 / n_spatial))
    out._backward = back
    return out


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of [N,C] logits against int labels."""
    logits = as_var(logits)
    labels = np.asarray(labels)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    n = z.shape[0]
    out = Var(-logp[np.arange(n), labels].mean(), (logits,))
    softmax = ez / sez

    def back(g):
        gl = softmax.copy()
        gl[np.arange(n), labels] -= 1.0
        _accum(logits, g * gl / n)
    out._backward = back
    return out


def _topo(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, leaves):
    """Gradients of a scalar `loss` Var for each leaf in `leaves`.

    `leaves` maps LeafId -> Var. Leaves that never reached the output get
    zero gradients of their own shape.
    """
    loss = as_var(loss)
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    order = _topo(loss)
    for v in order:
        v.grad = None
    loss.grad = np.asarray(1.0)
    for v in reversed(order):
        if v._backward is not None and v.grad is not None:
            v._backward(v.grad)
    return {
        lid: (lv.grad.copy() if lv.grad is not None else np.zeros(lv.data.shape))
        for lid, lv in leaves.items()
    }


def directional_second_derivative(grad_fn, point, direction, fd=None):
    """Central difference of a gradient field along `direction`.

    grad_fn(p) must return the exact gradient (of the quantity of
    interest, w.r.t. whichever leaf set it encodes) with the perturbed
    leaf set to the vector p. Returns

        [grad_fn(point + eps*d) - grad_fn(point - eps*d)] / (2*eps)

    with eps = eps_base / max(1, ||d||_inf), i.e. the action of the mixed
    (or plain) second-derivative matrix on `direction`. Exact on
    quadratics up to rounding.
    """
    fd = fd or FdConfig()
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != point.shape:
        raise ValueError(f"direction shape {direction.shape} != point {point.shape}")
    scale = np.max(np.abs(direction)) if direction.size else 0.0
    eps = fd.eps_base / max(1.0, scale)
    g_plus = grad_fn(point + eps * direction)
    g_minus = grad_fn(point - eps * direction)
    out = (g_plus - g_minus) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite directional second derivative")
    return out
