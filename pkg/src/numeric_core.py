"""Dense linear algebra, activations and normalization on numpy arrays.

Everything here is a pure function over arrays. Matrices are 2-D numpy arrays
in row-major order; the working precision is float64 unless the process
switches to float32 for benchmarks.
"""

import logging
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence, Type, Union

import numpy as np

from .utils.exceptions import NumericError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]], float]

SUPPORTED_PRECISIONS = {"float64": np.float64, "float32": np.float32}

_precision = "float64"

# tanh approximation constant for GELU
_GELU_C = float(np.sqrt(2.0 / np.pi))


def set_precision(name: str) -> None:
    """Select the process-wide working precision (float64 or float32)."""
    global _precision
    if name not in SUPPORTED_PRECISIONS:
        raise ValidationError(
            f"Unsupported precision '{name}'. Valid: {list(SUPPORTED_PRECISIONS)}"
        )
    if name != _precision:
        logger.info(f"Switching numeric precision {_precision} -> {name}")
    _precision = name


def get_precision() -> str:
    """Return the name of the current working precision."""
    return _precision


def get_dtype() -> type:
    """Return the numpy dtype of the current working precision."""
    return SUPPORTED_PRECISIONS[_precision]


@contextmanager
def precision_mode(name: str) -> Iterator[None]:
    """Temporarily switch precision inside a ``with`` block."""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def as_matrix(data: ArrayLike, cols: Optional[int] = None) -> np.ndarray:
    """Convert input to a 2-D array in the working precision.

    A flat sequence becomes a single row; ``cols`` gives the width of an
    empty matrix so that ``as_matrix([], cols=d)`` is ``0 x d``.
    """
    array = np.asarray(data, dtype=get_dtype())
    if array.ndim == 0:
        return array.reshape(1, 1)
    if array.ndim == 1:
        if array.size == 0:
            return array.reshape(0, cols or 0)
        return array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"Expected a matrix, got array of shape {array.shape}")
    return array


def zeros(rows: int, cols: int) -> np.ndarray:
    """Return a zero matrix in the working precision."""
    return np.zeros((rows, cols), dtype=get_dtype())


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard matrix product of two 2-D arrays."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects matrices, got shapes {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} "
            f"times {b.shape[0]}x{b.shape[1]}"
        )
    return np.matmul(a, b)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, stable for large positive and negative inputs."""
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: np.ndarray) -> np.ndarray:
    """Elementwise x * sigmoid(x)."""
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of SiLU: s * (1 + x * (1 - s))."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow."""
    return np.logaddexp(0.0, x)


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative of the tanh-approximated GELU."""
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


def layer_norm(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Normalize along the last axis to zero mean and unit variance.

    No learned scale or shift. Population variance; ``eps`` guards the
    zero-variance case.
    """
    y, _ = layer_norm_with_stats(x, eps)
    return y


def layer_norm_with_stats(x: np.ndarray, eps: float = 1e-6):
    """Layer norm returning ``(y, inv_std)`` for use in the backward pass."""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs at least one element per row")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std


def layer_norm_backward(grad_y: np.ndarray, y: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of ``layer_norm`` given its output."""
    mean_g = grad_y.mean(axis=-1, keepdims=True)
    mean_gy = (grad_y * y).mean(axis=-1, keepdims=True)
    return inv_std * (grad_y - mean_g - y * mean_gy)


def softmax_rows(x: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Softmax along the last axis over allowed entries.

    ``mask`` is a boolean array (True = allowed) broadcastable to ``x``.
    Masked entries are exactly 0 and a fully masked row is all zeros.
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(mask, x.shape)
    neg_inf = np.full(x.shape, -np.inf, dtype=x.dtype)
    masked = np.where(mask, x, neg_inf)
    row_max = masked.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    exp = np.where(mask, np.exp(np.where(mask, x - row_max, 0.0)), 0.0)
    total = exp.sum(axis=-1, keepdims=True)
    safe_total = np.where(total > 0.0, total, 1.0)
    return exp / safe_total


def ensure_finite(x: np.ndarray, what: str = "value", error: Type[NumericError] = NumericError) -> np.ndarray:
    """Raise ``error`` (a ``NumericError``) if ``x`` holds NaN or infinity."""
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise error(f"Non-finite {what}: {bad} of {np.size(x)} entries")
    return x
