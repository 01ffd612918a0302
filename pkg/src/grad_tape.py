"""Reverse-mode gradients through a recorded tape of numpy operations.

Usage::

    with GradTape() as tape:
        loss = sum_all(mul(w, w))
    tape.backward(loss)
    w.grad  # d loss / d w

Operations record themselves on the tape that is active in the current
context; outside a tape they only compute values, so inference code shares
the same functions without bookkeeping cost.
"""

import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numeric_core as nc
from .utils.exceptions import NumericError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

_active_tape: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "active_tape", default=None
)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An array value with an optional accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(
        self,
        value: Union[np.ndarray, float, Sequence],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        if isinstance(value, np.ndarray) and value.dtype == nc.get_dtype():
            self.value = value
        else:
            self.value = np.asarray(value, dtype=nc.get_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other: "TensorLike") -> "Tensor":
        return add(self, other)

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return add(other, self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]


@dataclass
class TapeRecord:
    """One primitive operation with what its backward pass needs."""

    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn


class GradTape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self) -> None:
        self._records: List[TapeRecord] = []
        self._token: Optional[contextvars.Token] = None
        self.backward_order: List[str] = []

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    @property
    def operations(self) -> List[str]:
        return [record.op for record in self._records]

    def record(
        self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn
    ) -> None:
        self._records.append(TapeRecord(op, output, inputs, backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from ``loss`` to every recorded input.

        Records are replayed in exact reverse order; gradients add up where a
        tensor feeds several operations.
        """
        if seed is None:
            if loss.value.size != 1:
                raise ShapeError(
                    f"backward needs a scalar loss or an explicit seed, got {loss.shape}"
                )
            seed = np.ones_like(loss.value)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        self.backward_order = []
        for record in reversed(self._records):
            self.backward_order.append(record.op)
            if record.output.grad is None:
                continue
            input_grads = record.backward(record.output.grad)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=tensor.value.dtype, copy=True)
                else:
                    tensor.grad = tensor.grad + grad


def active_tape() -> Optional[GradTape]:
    """Return the tape recording in the current context, if any."""
    return _active_tape.get()


def as_tensor(value: TensorLike) -> Tensor:
    """Wrap arrays and scalars as constant tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(op, out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _emit(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit("scale", a.value * factor, (a,), lambda g: (g * factor,))


def silu(a: Tensor) -> Tensor:
    x = a.value
    return _emit("silu", nc.silu(x), (a,), lambda g: (g * nc.silu_grad(x),))


def sigmoid(a: Tensor) -> Tensor:
    s = nc.sigmoid(a.value)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def gelu(a: Tensor) -> Tensor:
    x = a.value
    return _emit("gelu", nc.gelu(x), (a,), lambda g: (g * nc.gelu_grad(x),))


def softplus(a: Tensor) -> Tensor:
    x = a.value
    return _emit("softplus", nc.softplus(x), (a,), lambda g: (g * nc.sigmoid(x),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D operands use the core kernel, 3-D operands batch."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        value = nc.matmul(av, bv)
    else:
        if av.shape[-1] != bv.shape[-2]:
            raise ShapeError(
                f"matmul dimension mismatch: {av.shape} times {bv.shape}"
            )
        value = np.matmul(av, bv)

    def backward(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit("matmul", value, (a, b), backward)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return _emit(
        "reshape", a.value.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),)
    )


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    shape = a.shape

    def backward(g: np.ndarray):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_last", a.value[..., start:stop], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g: np.ndarray):
        pieces = []
        for i in range(len(tensors)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            pieces.append(g[tuple(index)])
        return tuple(pieces)

    return _emit(
        "concat", np.concatenate([t.value for t in tensors], axis=axis), tensors, backward
    )


def index_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of ``table`` at ``indices``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g: np.ndarray):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("index_rows", table.value[idx], (table,), backward)


def take(vector: Tensor, indices: np.ndarray) -> Tensor:
    """Gather entries of a 1-D tensor into an array shaped like ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = vector.shape

    def backward(g: np.ndarray):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape(-1))
        return (full,)

    return _emit("take", vector.value[idx], (vector,), backward)


# --------------------------------------------------------------- reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(
        "sum_all",
        np.asarray(a.value.sum(), dtype=a.value.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    n = max(a.value.size, 1)
    return scale(sum_all(a), 1.0 / n)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g: np.ndarray):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum_axis", a.value.sum(axis=axis, keepdims=keepdims), (a,), backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    row_max = x.max(axis=axis, keepdims=True)
    shifted = np.exp(x - row_max)
    total = shifted.sum(axis=axis, keepdims=True)
    value = (np.log(total) + row_max).squeeze(axis)
    probs = shifted / total

    def backward(g: np.ndarray):
        return (np.expand_dims(g, axis) * probs,)

    return _emit("logsumexp", value, (a,), backward)


# ------------------------------------------------------------ normalization


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    y, inv_std = nc.layer_norm_with_stats(a.value, eps)
    return _emit(
        "layer_norm", y, (a,), lambda g: (nc.layer_norm_backward(g, y, inv_std),)
    )


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis at allowed positions; masked entries are 0."""
    p = nc.softmax_rows(a.value, mask)

    def backward(g: np.ndarray):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _emit("masked_softmax", p, (a,), backward)


# --------------------------------------------------------------- checking


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients with central differences.

    Returns the maximum of ``|analytic - numeric| / max(1, |analytic|)`` over
    every entry of every parameter.
    """
    if step <= 0:
        raise ValidationError(f"grad_check step must be positive, got {step}")

    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("grad_check: loss is not finite")
    tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        analytic_flat = analytic.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = loss_fn().value
            flat[i] = original - step
            minus = loss_fn().value
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError("grad_check: perturbed loss is not finite")
            numeric = float((plus - minus) / (2.0 * step))
            a = float(analytic_flat[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    logger.debug(f"grad_check over {len(params)} parameters: max rel error {worst:.3e}")
    return worst
