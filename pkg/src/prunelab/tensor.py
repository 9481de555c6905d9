"""Dense float64 array substrate and deterministic randomness.

Tensors are plain numpy float64 ndarrays in row-major order (NCHW for
images, OIHW for conv kernels). Every operation here is pure and all
randomness flows through :class:`SeededRng`, a named counter-based PRNG
(Philox 4x64) so identical seeds give identical streams on every
platform, and independent streams can be derived by tag.
"""

import zlib

import numpy as np

from . import kernels


class SeededRng:
    """Philox-backed generator with deterministic named sub-streams."""

    algorithm = "philox4x64"

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def stream(self, tag):
        """Derive an independent generator for `tag` (str or int).

        The child key mixes the parent seed with a CRC of the tag, so the
        dataset, init, and shuffle streams never interact.
        """
        if isinstance(tag, str):
            salt = zlib.crc32(tag.encode())
        else:
            salt = int(tag) & 0xFFFFFFFF
        key = (self.seed << 32 | salt) & ((1 << 128) - 1)
        return SeededRng._from_key(key)

    @staticmethod
    def _from_key(key):
        rng = SeededRng.__new__(SeededRng)
        rng.seed = key
        rng._gen = np.random.Generator(np.random.Philox(key=key))
        return rng

    def normal(self, shape, mean=0.0, std=1.0):
        return rng_normal(self, shape, mean, std)

    def integers(self, lo, hi, size=None):
        return self._gen.integers(lo, hi, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def uniform(self, lo, hi, size=None):
        return np.asarray(self._gen.uniform(lo, hi, size=size), dtype=np.float64)


def create(shape, init="zeros", value=None):
    """Build a float64 tensor: zeros, ones, constant(c), or from_values(v)."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"extents must be >= 1, got {shape}")
    if init == "zeros":
        return np.zeros(shape)
    if init == "ones":
        return np.ones(shape)
    if init == "constant":
        return np.full(shape, float(value))
    if init == "from_values":
        data = np.asarray(value, dtype=np.float64).reshape(-1)
        n = int(np.prod(shape))
        if data.size != n:
            raise ValueError(f"{data.size} values for shape {shape} ({n} slots)")
        return data.reshape(shape).copy()
    raise ValueError(f"unknown init {init!r}")


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes {a.shape} x {b.shape}")
    return a @ b


def conv2d(x, kern, stride=1, pad=0):
    """Cross-correlation (no kernel flip) of NCHW input with OIHW kernel."""
    x = np.asarray(x, dtype=np.float64)
    kern = np.asarray(kern, dtype=np.float64)
    if x.ndim != 4 or kern.ndim != 4:
        raise ValueError("conv2d wants NCHW input and OIHW kernel")
    n, c, h, w = x.shape
    o, ck, kh, kw = kern.shape
    if c != ck:
        raise ValueError(f"channel mismatch: input {c}, kernel {ck}")
    for name, dim, k in (("H", h, kh), ("W", w, kw)):
        if (dim + 2 * pad - k) % stride != 0:
            raise ValueError(f"non-integral output {name}: ({dim}+2*{pad}-{k})/{stride}")
    return kernels.conv2d_forward(x, kern, stride, pad)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "relu": lambda a: np.maximum(a, 0.0),
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "abs": np.abs,
}

_REDUCTIONS = {"sum": np.sum, "max": np.max, "min": np.min, "mean": np.mean}


def map_reduce(op, *operands, axis=None):
    """Elementwise ops under numpy broadcasting rules, or a full/axis reduction."""
    arrays = [np.asarray(a, dtype=np.float64) for a in operands]
    if op in _ELEMENTWISE:
        try:
            out = _ELEMENTWISE[op](*arrays)
        except ValueError as e:
            raise ValueError(f"{op}: incompatible shapes "
                             f"{[a.shape for a in arrays]}") from e
        return np.asarray(out, dtype=np.float64)
    if op in _REDUCTIONS:
        (a,) = arrays
        return np.asarray(_REDUCTIONS[op](a, axis=axis), dtype=np.float64)
    raise ValueError(f"unknown op {op!r}")


def rng_normal(rng, shape, mean=0.0, std=1.0):
    if std < 0:
        raise ValueError("std must be >= 0")
    shape = tuple(int(s) for s in shape)
    if std == 0.0:
        # advance the stream the same amount either way
        rng._gen.standard_normal(shape)
        return np.full(shape, float(mean))
    return mean + std * rng._gen.standard_normal(shape)
