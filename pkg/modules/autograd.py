"""Reverse-mode automatic differentiation over dense float64 arrays.

The tape is define-by-run: ops executed inside a `recording()` block append a
record to the active `Tape` whenever one of their inputs requires a gradient.
Outside a recording block ops are plain numpy evaluations, which is what the
decoders use. `backward` walks the records of the loss's tape exactly once in
reverse order.

Broadcasting is limited to what the caption decoder needs (bias rows, additive
masks, batched matmul against a 2-D weight). Gradients of broadcast operands
are summed back to the operand's shape.
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Final

import numpy as np

from modules.dtypes import BoolArray, FloatArray, IntArray
from modules.exceptions import ShapeError, TokenRangeError

log = logging.getLogger(__name__)

type ArrayLike = FloatArray | float | int | Sequence[float] | Sequence[Sequence[float]]
# Maps the output gradient to one gradient (or None) per input.
type BackwardFn = Callable[[FloatArray], tuple[FloatArray | None, ...]]

_uids = itertools.count(1)


class Tensor:
    """A float64 array that may participate in a gradient tape."""

    __slots__ = ("_tape", "data", "node_id", "requires_grad", "uid")

    def __init__(self, data: ArrayLike, *, requires_grad: bool = False) -> None:
        self.data: FloatArray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.uid = next(_uids)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            msg = f"item: tensor of shape {self.shape} is not a scalar"
            raise ShapeError(msg)
        return float(self.data.reshape(()))

    def numpy(self) -> FloatArray:
        return self.data

    def detach(self) -> Tensor:
        """Return a tape-free copy that does not require grad."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, node_id={self.node_id})"

    # Operator sugar. Python scalars are wrapped as constants.
    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, _lift(other))

    def __radd__(self, other: float) -> Tensor:
        return add(_lift(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return sub(self, _lift(other))

    def __rsub__(self, other: float) -> Tensor:
        return sub(_lift(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return mul(self, _lift(other))

    def __rmul__(self, other: float) -> Tensor:
        return mul(_lift(other), self)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        return div(self, _lift(other))

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _lift(value: Tensor | float) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data)


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass(slots=True)
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass(slots=True)
class Tape:
    """Ordered op records; inputs of a record always precede it."""

    records: list[TapeRecord] = field(default_factory=list)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        output.node_id = len(self.records)
        output._tape = self
        self.records.append(TapeRecord(op, inputs, output, backward))

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: ContextVar[Tape | None] = ContextVar("active_tape", default=None)


@contextmanager
def recording() -> Iterator[Tape]:
    """Record differentiable ops on a fresh tape for the duration of the block."""
    tape = Tape()
    token = _ACTIVE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE.reset(token)


@contextmanager
def paused() -> Iterator[None]:
    """Evaluate ops without recording, even inside a recording block."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def is_recording() -> bool:
    return _ACTIVE.get() is not None


def _emit(op: str, inputs: tuple[Tensor, ...], out: FloatArray, backward: BackwardFn) -> Tensor:
    result = Tensor(out)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(op, inputs, result, backward)
    return result


class GradMap:
    """Accumulated gradients keyed by tensor; unreachable tensors read as zeros."""

    __slots__ = ("_grads",)

    def __init__(self, grads: dict[int, FloatArray] | None = None) -> None:
        self._grads: dict[int, FloatArray] = grads or {}

    def __getitem__(self, tensor: Tensor) -> FloatArray:
        grad = self._grads.get(tensor.uid)
        return grad if grad is not None else np.zeros_like(tensor.data)

    def get(self, tensor: Tensor) -> FloatArray | None:
        return self._grads.get(tensor.uid)

    def __contains__(self, tensor: object) -> bool:
        return isinstance(tensor, Tensor) and tensor.uid in self._grads

    def __len__(self) -> int:
        return len(self._grads)


def _unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> GradMap:
    """Propagate d(loss)/d(x) to every tensor on the loss's tape."""
    if loss.size != 1:
        msg = f"backward: loss must be a scalar, got shape {loss.shape}"
        raise ShapeError(msg)
    tape = loss._tape
    if tape is None or loss.node_id is None:
        # Nothing recorded: every parameter is unreachable.
        return GradMap()

    grads: dict[int, FloatArray] = {loss.uid: np.ones_like(loss.data)}
    for record in reversed(tape.records[: loss.node_id + 1]):
        upstream = grads.get(record.output.uid)
        if upstream is None:
            continue
        for tensor, grad in zip(record.inputs, record.backward(upstream), strict=True):
            if grad is None or not tensor.requires_grad:
                continue
            grad = _unbroadcast(grad, tensor.shape)
            if tensor.uid in grads:
                grads[tensor.uid] = grads[tensor.uid] + grad
            else:
                grads[tensor.uid] = grad
    return GradMap(grads)


# Elementwise arithmetic


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        msg = f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        raise ShapeError(msg) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    a_data, b_data = a.data, b.data
    return _emit("mul", (a, b), a_data * b_data, lambda g: (g * b_data, g * a_data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    a_data, b_data = a.data, b.data
    return _emit("div", (a, b), a_data / b_data, lambda g: (g / b_data, -g * a_data / (b_data * b_data)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a_data = a.data
    return _emit("log", (a,), np.log(a_data), lambda g: (g / a_data,))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _emit("relu", (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp to [low, high]; gradient is zero wherever the clamp is active."""
    inside = (a.data >= low) & (a.data <= high)
    return _emit("clip", (a,), np.clip(a.data, low, high), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to `a`."""
    _check_broadcast("minimum", a, b)
    pick_a = a.data <= b.data
    return _emit("minimum", (a, b), np.where(pick_a, a.data, b.data), lambda g: (g * pick_a, g * ~pick_a))


def masked_fill(a: Tensor, mask: BoolArray, value: float) -> Tensor:
    try:
        keep = ~np.broadcast_to(mask, a.shape)
    except ValueError:
        msg = f"masked_fill: mask shape {mask.shape} does not broadcast to {a.shape}"
        raise ShapeError(msg) from None
    return _emit("masked_fill", (a,), np.where(keep, a.data, value), lambda g: (g * keep,))


# Linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        msg = f"matmul: shapes {a.shape} and {b.shape} do not conform"
        raise ShapeError(msg)
    a_data, b_data = a.data, b.data

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray]:
        return g @ np.swapaxes(b_data, -1, -2), np.swapaxes(a_data, -1, -2) @ g

    return _emit("matmul", (a, b), a_data @ b_data, _backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        perm = list(range(a.ndim))
        if a.ndim < 2:
            msg = f"transpose: need at least 2 dims, got shape {a.shape}"
            raise ShapeError(msg)
        perm[-1], perm[-2] = perm[-2], perm[-1]
    else:
        perm = list(axes)
        if sorted(perm) != list(range(a.ndim)):
            msg = f"transpose: axes {perm} invalid for shape {a.shape}"
            raise ShapeError(msg)
    inverse = np.argsort(perm)
    return _emit("transpose", (a,), np.transpose(a.data, perm), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        msg = f"reshape: cannot reshape {original} into {tuple(shape)}"
        raise ShapeError(msg) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(original),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        msg = "concat: no inputs"
        raise ShapeError(msg)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        msg = f"concat: shapes {[t.shape for t in tensors]} do not conform along axis {axis}"
        raise ShapeError(msg) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g: FloatArray) -> tuple[FloatArray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, _backward)


def embedding_gather(table: Tensor, ids: IntArray) -> Tensor:
    """Rows of `table` selected by integer `ids` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        msg = f"embedding_gather: table must be 2-D, got shape {table.shape}"
        raise ShapeError(msg)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        msg = f"embedding_gather: ids outside [0, {table.shape[0]})"
        raise TokenRangeError(msg)
    rows = table.shape

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        grad = np.zeros(rows)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (grad,)

    return _emit("embedding_gather", (table,), table.data[ids], _backward)


def take_last(a: Tensor, ids: IntArray) -> Tensor:
    """Select a[..., ids[...]] along the last axis; `ids` has shape a.shape[:-1]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        msg = f"take_last: ids shape {ids.shape} does not match {a.shape[:-1]}"
        raise ShapeError(msg)
    full = a.shape
    picked = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        grad = np.zeros(full)
        np.put_along_axis(grad, ids[..., None], g[..., None], axis=-1)
        return (grad,)

    return _emit("take_last", (a,), picked, _backward)


# Reductions


def sum_(a: Tensor, axis: int | None = None, *, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), _backward)


def mean(a: Tensor, axis: int | None = None, *, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return sum_(a, axis, keepdims=keepdims) * (1.0 / count)


# Normalisation and probabilities


def softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), out, _backward)


def _log_softmax(x: FloatArray) -> FloatArray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax(a: Tensor) -> Tensor:
    out = _log_softmax(a.data)
    probs = np.exp(out)

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, _backward)


LAYER_NORM_EPS: Final = 1e-12


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last dim (population variance), then scale and shift."""
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        msg = f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last dim of {a.shape}"
        raise ShapeError(msg)
    centred = a.data - a.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    normed = centred * rstd
    gain_data = gain.data

    def _backward(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        d_normed = g * gain_data
        d_x = rstd * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return d_x, g * normed, g

    return _emit("layer_norm", (a, gain, bias), normed * gain_data + bias.data, _backward)


def cross_entropy(logits: Tensor, targets: IntArray, ignore_index: int | None = None) -> Tensor:
    """Mean token-level negative log-likelihood; positions equal to `ignore_index` are skipped."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        msg = f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        raise ShapeError(msg)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        msg = f"cross_entropy: targets outside [0, {vocab})"
        raise TokenRangeError(msg)
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    logp = _log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count if count else 0.0

    def _backward(g: FloatArray) -> tuple[FloatArray]:
        if not count:
            return (np.zeros_like(logp),)
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (keep[..., None] * (float(g) / count)),)

    return _emit("cross_entropy", (logits,), np.array(loss), _backward)


def log_softmax_array(x: FloatArray) -> FloatArray:
    """Tape-free log-softmax over the last dim."""
    return _log_softmax(np.asarray(x, dtype=np.float64))
