"""Small deterministic numeric kernel.

Tensors are plain ``numpy.ndarray`` values (float64 by default, float32 on
request).  The helpers here add what numpy does not promise on its own:

* ``matmul`` accumulates over the inner dimension strictly left to right, so
  results do not depend on the BLAS build or thread count;
* every public op rejects non-finite results instead of propagating them;
* ``Rng`` is a counter-based generator (Philox4x64-10 keyed by the seed) so a
  seed names the same stream on every machine.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

DTYPES = {"f64": np.float64, "f32": np.float32}


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinity."""


def tensor(data, dtype=np.float64) -> Tensor:
    out = np.array(data, dtype=dtype)
    check_finite(out, "tensor")
    return out


def check_finite(x: Tensor, what: str = "result") -> Tensor:
    if not np.isfinite(x).all():
        raise NumericError(f"{what}: non-finite values")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Dense 2-D product with a fixed left-to-right reduction order.

    Each output element is ``((a0*b0 + a1*b1) + a2*b2) + ...``, which is the
    same sequence of roundings as a scalar triple loop.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    if k == 0:
        return np.zeros((m, n), dtype=dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a[:, 0:1] * b[0:1, :]
        for j in range(1, k):
            out += a[:, j : j + 1] * b[j : j + 1, :]
    return check_finite(out.astype(dtype, copy=False), "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax.  ``-inf`` entries are allowed and map to 0."""
    if x.ndim == 0:
        raise DimensionError("softmax of a scalar")
    axis = _normalize_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError("softmax: NaN or +inf input")
    top = np.max(x, axis=axis, keepdims=True)
    if not np.isfinite(top).all():
        raise NumericError("softmax: a slice is entirely -inf")
    e = np.exp(x - top)
    return check_finite(e / np.sum(e, axis=axis, keepdims=True), "softmax")


def sigmoid(x: Tensor) -> Tensor:
    # exp(-log(1 + exp(-x))) never overflows
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: Tensor) -> Tensor:
    return check_finite(x * sigmoid(x), "silu")


def silu_grad(x: Tensor) -> Tensor:
    """d/dx silu(x) = s(x) * (1 + x * (1 - s(x)))."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return check_finite(x / np.sqrt(ms + eps) * weight, "rms_norm")


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        fp = float(f(x))
        flat[j] = orig - eps
        fm = float(f(x))
        flat[j] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"finite_diff_grad: non-finite f near coordinate {j}")
        gflat[j] = (fp - fm) / (2.0 * eps)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


class Rng:
    """Counter-based PRNG: draw ``i`` is Philox4x64-10(counter=i, key=seed).

    Uniforms take the top 53 bits of each 64-bit draw; normals use the
    Box-Muller transform on consecutive uniform pairs.  ``child(name)`` derives
    an independent stream keyed by ``blake2b(seed || name)`` so that parameter
    values depend on their name, not on allocation order.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._bitgen = np.random.Philox(key=self.seed)
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        self.counter += n
        return np.asarray(self._bitgen.random_raw(n), dtype=np.uint64)

    def uniform(self, shape: Sequence[int] | int = ()) -> Tensor:
        """Uniform floats in [0, 1)."""
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape: Sequence[int] | int = (), std: float = 1.0) -> Tensor:
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (std * z[:n]).reshape(shape)

    def integers(self, low: int, high: int, shape: Sequence[int] | int = ()) -> np.ndarray:
        """Integers in [low, high) by unbiased rejection on the raw stream."""
        if high <= low:
            raise ValueError("empty integer range")
        span = high - low
        n = int(np.prod(shape))
        limit = (2**64 // span) * span
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            draws = self.raw(n - filled)
            draws = draws[draws < np.uint64(limit)] if limit < 2**64 else draws
            take = draws[: n - filled]
            out[filled : filled + take.size] = (take % np.uint64(span)).astype(np.int64) + low
            filled += take.size
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by this stream
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def child(self, name: str) -> "Rng":
        h = hashlib.blake2b(self.seed.to_bytes(8, "little") + name.encode(), digest_size=8)
        return Rng(int.from_bytes(h.digest(), "little"))
