"""Dense numeric kernels shared by every other module.

Arrays are plain :class:`numpy.ndarray` objects. All reductions used here run
in a fixed left-to-right order (``np.add.accumulate``) instead of numpy's
pairwise summation, so a row's result depends only on that row's values and
never on how many other rows share the call. The streaming and whole-utterance
encoders rely on this to agree bit for bit.
"""

from __future__ import annotations

import contextlib
import os
from typing import Iterator

import numpy as np

Tensor = np.ndarray

PRECISION_ENV = "STREAMFORMER_PRECISION"
_DTYPES = {"float64": np.float64, "float32": np.float32}

# Upper bound on the temporary product cube built by ``matmul``.
_MATMUL_CHUNK = 1 << 21

_dtype = np.dtype(_DTYPES.get(os.environ.get(PRECISION_ENV, "float64"), np.float64))


class ShapeError(ValueError):
    """Operand extents are incompatible."""


def set_precision(name: str) -> None:
    """Select the global working precision (``"float64"`` or ``"float32"``)."""
    global _dtype
    try:
        _dtype = np.dtype(_DTYPES[name])
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


def get_dtype() -> np.dtype:
    return _dtype


def precision_name() -> str:
    return "float32" if _dtype == np.float32 else "float64"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = precision_name()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def tensor(data, shape=None) -> Tensor:
    """Build an array in the working precision, optionally reshaped."""
    arr = np.array(data, dtype=_dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} elements as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def seq_sum(x: Tensor, axis: int = -1) -> Tensor:
    """Sum along ``axis`` strictly left to right."""
    x = np.asarray(x)
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis % x.ndim), dtype=x.dtype)
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed summation order over the inner extent.

    Element ``(i, j)`` equals ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    exactly what a naive triple loop produces.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    dtype = np.result_type(a, b)
    if k == 0 or m == 0 or n == 0:
        return np.zeros((m, n), dtype=dtype)
    out = np.empty((m, n), dtype=dtype)
    rows = max(1, _MATMUL_CHUNK // (k * n))
    for start in range(0, m, rows):
        prod = a[start : start + rows, :, None] * b[None, :, :]
        out[start : start + rows] = np.add.accumulate(prod, axis=1)[:, -1, :]
    return out


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis.

    ``-inf`` entries are allowed (they come out as exact zeros) but every row
    needs at least one finite entry.
    """
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    if np.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    peak = np.max(x, axis=-1, keepdims=True)
    if not np.isfinite(peak).all():
        raise ValueError("softmax row has no finite entry")
    e = np.exp(x - peak)
    return e / seq_sum(e)[..., None]


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with biased variance, then affine gain/bias."""
    x = np.asarray(x)
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs a nonempty feature axis")
    mean = seq_sum(x)[..., None] / d
    centered = x - mean
    var = seq_sum(centered * centered)[..., None] / d
    return centered / np.sqrt(var + eps) * gain + bias


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def swish(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def glu_lastaxis(x: Tensor) -> Tensor:
    x = np.asarray(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"glu needs an even last extent, got {x.shape[-1]}")
    half = x.shape[-1] // 2
    return x[..., :half] * sigmoid(x[..., half:])
