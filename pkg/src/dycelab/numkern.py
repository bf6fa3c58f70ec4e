"""Dense float64 kernel shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The helpers here add the shape checks and finiteness guarantees the
rest of the package relies on, a counter-based RNG, and the DYCT binary
format used for checkpoints and dataset export.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

DYCT_MAGIC = b"DYCT"
DYCT_VERSION = 1


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


def as_tensor(x, name="tensor"):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of range for rank {x.ndim}")
    if np.isnan(x).any():
        raise ContractError("softmax input contains NaN")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_backward(s, grad_s, axis=-1):
    """Vector-Jacobian product of softmax given its output ``s``."""
    return s * (grad_s - (grad_s * s).sum(axis=axis, keepdims=True))


def linear(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ContractError(f"linear expects 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ContractError(f"linear shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


class Rng:
    """Counter-based generator (Philox) keyed on ``(seed, stream)``.

    Two instances built from the same seed and stream produce the same
    draws in the same order, independent of platform and of any other
    stream's consumption.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream):
        """Independent generator for a sub-stream (e.g. one image)."""
        return Rng(self.seed, (self.stream * 1_000_003 + int(stream) + 1))

    def normal(self, shape=None, scale=1.0):
        return self._gen.standard_normal(shape) * scale

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def choice(self, n, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random_raw(self, n):
        return self._gen.bit_generator.random_raw(n)


def dumps_tensor(x):
    arr = np.ascontiguousarray(x, dtype="<f8")
    if arr.ndim > 255:
        raise ContractError("DYCT supports rank <= 255")
    buf = io.BytesIO()
    buf.write(DYCT_MAGIC)
    buf.write(struct.pack("<BB", DYCT_VERSION, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())
    return buf.getvalue()


def loads_tensor(data):
    if data[:4] != DYCT_MAGIC:
        raise ContractError("not a DYCT blob (bad magic)")
    if len(data) < 6 or len(data) < 6 + 8 * data[5]:
        raise ContractError("DYCT header truncated")
    version, rank = struct.unpack_from("<BB", data, 4)
    if version != DYCT_VERSION:
        raise ContractError(f"unsupported DYCT version {version}")
    off = 6
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) - off != 8 * count:
        raise ContractError(f"DYCT payload length {len(data) - off} does not match shape {shape}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)


def save_tensor(path, x):
    Path(path).write_bytes(dumps_tensor(x))


def load_tensor(path):
    return loads_tensor(Path(path).read_bytes())
