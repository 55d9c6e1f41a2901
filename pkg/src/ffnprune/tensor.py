"""Dense numeric kernels.

All matrices are 2-D numpy arrays, row-major, float32 by default; a float64
mode (same kernels, float64 buffers) exists for gradient checking. Reductions
(matmul inner products, norms, softmax sums) always accumulate in float64,
even in float32 mode, and the result is cast back to the input dtype. Kernels
are pure: no hidden state, no internal threading, same buffers in, bit-equal
buffers out.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray

F32 = np.float32
F64 = np.float64

# Stack of active multiply counters; see mac_counter().
_MAC_COUNTERS: list["MacCounter"] = []


class MacCounter:
    """Counts multiply-accumulates of every matmul issued while active."""

    def __init__(self) -> None:
        self.macs = 0


@contextlib.contextmanager
def mac_counter():
    """Context manager yielding a MacCounter fed by matmul calls inside it."""
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _check_2d(name: str, x: Matrix) -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got "
                         f"{getattr(x, 'shape', type(x).__name__)}")


def _out_dtype(*arrays: Matrix) -> np.dtype:
    return np.dtype(F64) if any(a.dtype == F64 for a in arrays) else np.dtype(F32)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """c[i][j] = sum_p a[i][p] * b[p][j], accumulated in float64."""
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    for counter in _MAC_COUNTERS:
        counter.macs += m * k * n
    c = np.matmul(a.astype(F64, copy=False), b.astype(F64, copy=False))
    return c.astype(_out_dtype(a, b), copy=False)


def sigmoid(x: Matrix) -> Matrix:
    # Branch on sign so exp never overflows.
    pos = x >= 0
    z = np.where(pos, -x, x)
    ez = np.exp(z)
    return np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def silu(x: Matrix) -> Matrix:
    """y = x * sigmoid(x), elementwise."""
    return (x * sigmoid(x)).astype(x.dtype, copy=False)


def rms_norm(x: Matrix, gain: np.ndarray, eps: float) -> Matrix:
    """Scale each row by 1/sqrt(mean(x^2) + eps), then apply elementwise gain."""
    _check_2d("x", x)
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"gain shape {gain.shape} does not match row width {x.shape[1]}")
    x64 = x.astype(F64, copy=False)
    ms = np.mean(x64 * x64, axis=1, keepdims=True)
    y = x64 / np.sqrt(ms + eps) * gain.astype(F64, copy=False)
    return y.astype(x.dtype, copy=False)


def causal_softmax_rows(scores: Matrix) -> Matrix:
    """Row i is a softmax over columns 0..i; entries beyond i are exactly zero.

    The row maximum is subtracted before exponentiation, so the result is
    invariant under a constant offset of the inputs.
    """
    _check_2d("scores", scores)
    t = scores.shape[0]
    if scores.shape[1] != t:
        raise ShapeError(f"causal softmax needs a square matrix, got {scores.shape}")
    s64 = scores.astype(F64, copy=False)
    allowed = np.tril(np.ones((t, t), dtype=bool))
    masked = np.where(allowed, s64, -np.inf)
    m = np.max(masked, axis=1, keepdims=True)
    e = np.exp(masked - m)
    out = e / np.sum(e, axis=1, keepdims=True)
    return out.astype(scores.dtype, copy=False)


def channel_l2_norms(x: Matrix) -> np.ndarray:
    """Per-column L2 norm over rows (tokens), float64 accumulation and result."""
    _check_2d("x", x)
    if x.shape[0] < 1:
        raise ShapeError("need at least one row")
    x64 = x.astype(F64, copy=False)
    return np.sqrt(np.sum(x64 * x64, axis=0))
