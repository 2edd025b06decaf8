"""
Reverse-Mode Differentiation Core
Dense numpy tensors, an explicit tape of primitive operations, and a backward pass
that replays the tape in reverse order.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config.settings import runtime_config
from services.errors import DataError, NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardRule = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def default_dtype() -> np.dtype:
    """Floating point type for new tensors (float64 unless WCTX_DTYPE says otherwise)"""
    return np.dtype(runtime_config.dtype)


class Tensor:
    """
    An n-dimensional array that can participate in a differentiation tape.

    `grad` is filled by `backward` for every tensor with `requires_grad=True`
    that entered the tape as an operand without being produced by it (a leaf).
    """

    __array_priority__ = 1000

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors convert to float")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar, every one of these goes through a recorded primitive
    def __add__(self, other: Any) -> "Tensor":
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)


def _as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# =====================================================
# TAPE
# =====================================================

@dataclass
class TapeEntry:
    """One recorded primitive application"""
    op_kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_rule: BackwardRule


class Tape:
    """
    Ordered record of primitive operations.

    Used as a context manager: primitives applied inside the `with` block are
    recorded when at least one operand requires a gradient. A tape belongs to
    the thread that opened it.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def backward(self, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
        return backward(self, loss, leaves)


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op_kind: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, rule: BackwardRule) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad)
    tape = active_tape()
    if tape is not None and requires_grad:
        tape.record(TapeEntry(op_kind, inputs, out, rule))
    return out


def _check_finite(op_kind: str, *tensors: Tensor) -> None:
    if not runtime_config.check_finite:
        return
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NumericError(f"{op_kind}: non-finite input of shape {t.shape}")


def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so that grad matches to_shape"""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, extent in enumerate(to_shape):
        if extent == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def _broadcast_shape(op_kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op_kind, a.shape, b.shape, detail="not broadcastable") from None


# =====================================================
# PRIMITIVES
# =====================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting"""
    _broadcast_shape("add", a, b)
    _check_finite("add", a, b)

    def rule(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a, b)

    def rule(g: np.ndarray):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting"""
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a, b)

    def rule(g: np.ndarray):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast"""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes not broadcastable") from None
    _check_finite("matmul", a, b)

    def rule(g: np.ndarray):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), np.matmul(a.data, b.data), rule)


def sigmoid(x: Tensor) -> Tensor:
    _check_finite("sigmoid", x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def rule(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, rule)


def tanh(x: Tensor) -> Tensor:
    _check_finite("tanh", x)
    out = np.tanh(x.data)

    def rule(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (x,), out, rule)


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x)
    positive = x.data > 0

    def rule(g: np.ndarray):
        return (g * positive,)

    return _emit("relu", (x,), np.where(positive, x.data, 0.0).astype(x.data.dtype), rule)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    _check_finite("gelu", x)
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def rule(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * d_inner),)

    return _emit("gelu", (x,), out, rule)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis.

    `mask` is a boolean keep-array broadcastable to x; masked entries receive
    exactly zero weight. Every row must keep at least one entry.
    """
    _check_finite("softmax", x)
    z = x.data
    if mask is not None:
        try:
            keep = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise ShapeError("softmax", z.shape, np.shape(mask), detail="mask not broadcastable") from None
        if not keep.any(axis=-1).all():
            raise NumericError("softmax: a row has every entry masked")
        peak = np.max(np.where(keep, z, -np.inf), axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, z - peak, 0.0)), 0.0)
    else:
        e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), out, rule)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concatenate", detail="no operands")
    ndim = tensors[0].ndim
    ax = axis if axis >= 0 else axis + ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError("concatenate", tensors[0].shape, t.shape, detail=f"axis {axis}")
    _check_finite("concatenate", *tensors)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def rule(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concatenate", tuple(tensors), np.concatenate([t.data for t in tensors], axis=ax), rule)


def slice_(x: Tensor, index: Any) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis"""
    if isinstance(index, (list, np.ndarray)):
        raise ShapeError("slice", x.shape, detail="advanced indexing is not a primitive")
    try:
        out = x.data[index]
    except IndexError as e:
        raise ShapeError("slice", x.shape, detail=str(e)) from None
    _check_finite("slice", x)

    def rule(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), np.array(out, copy=True), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    _check_finite("reshape", x)

    def rule(g: np.ndarray):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, rule)


def flatten(x: Tensor, start_axis: int = 1) -> Tensor:
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, detail="not a permutation of the axes")
    _check_finite("transpose", x)
    inverse = tuple(np.argsort(axes))

    def rule(g: np.ndarray):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), np.transpose(x.data, axes), rule)


def sum_(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    _check_finite("sum", x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(out, dtype=x.data.dtype), rule)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def conv_time(x: Tensor, w: Tensor) -> Tensor:
    """
    Valid convolution with a k x 1 kernel running along the time axis.

    x: [B, F_in, C, T]   w: [F_out, F_in, k]   ->   [B, F_out, C, T - k + 1]
    Each sensor channel C is convolved independently with shared weights.
    """
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv_time", x.shape, w.shape)
    k = w.shape[2]
    t_out = x.shape[3] - k + 1
    if t_out < 1:
        raise ShapeError("conv_time", x.shape, w.shape, detail=f"time length {x.shape[3]} shorter than kernel {k}")
    _check_finite("conv_time", x, w)

    cols = sliding_window_view(x.data, k, axis=3)  # [B, F_in, C, T', k]
    out = np.tensordot(cols, w.data, axes=([1, 4], [1, 2]))  # [B, C, T', F_out]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def rule(g: np.ndarray):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx[..., j:j + t_out] += np.tensordot(g, w.data[:, :, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        return gx, gw

    return _emit("conv_time", (x, w), out, rule)


def dropout(x: Tensor, mask: np.ndarray, keep_prob: float) -> Tensor:
    """Inverted dropout with an explicit 0/1 keep mask"""
    if not 0.0 < keep_prob <= 1.0:
        raise NumericError(f"dropout: keep probability {keep_prob} outside (0, 1]")
    try:
        np.broadcast_shapes(x.shape, np.shape(mask))
    except ValueError:
        raise ShapeError("dropout", x.shape, np.shape(mask)) from None
    _check_finite("dropout", x)
    scale = np.asarray(mask, dtype=x.data.dtype) / keep_prob

    def rule(g: np.ndarray):
        return (unbroadcast(g * scale, x.shape),)

    return _emit("dropout", (x,), x.data * scale, rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable scale and shift"""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    _check_finite("layer_norm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def rule(g: np.ndarray):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _emit("layer_norm", (x, gamma, beta), out, rule)


def weighted_cross_entropy(logits: Tensor, labels: ArrayLike, class_weights: ArrayLike) -> Tensor:
    """
    Class-weighted cross-entropy, normalized by the summed weight of the batch.

    loss = sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i]
    """
    if logits.ndim != 2:
        raise ShapeError("weighted_cross_entropy", logits.shape, detail="logits must be [B, n]")
    batch, n = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    w = np.asarray(class_weights, dtype=logits.data.dtype)
    if y.shape != (batch,):
        raise ShapeError("weighted_cross_entropy", logits.shape, y.shape)
    if w.shape != (n,):
        raise ShapeError("weighted_cross_entropy", logits.shape, w.shape, detail="one weight per class")
    if batch and (y.min() < 0 or y.max() >= n):
        raise DataError(f"weighted_cross_entropy: label out of range [0, {n})")
    if (w < 0).any():
        raise DataError("weighted_cross_entropy: negative class weight")
    _check_finite("weighted_cross_entropy", logits)

    sample_w = w[y]
    total = sample_w.sum()
    if not total > 0:
        raise DataError("weighted_cross_entropy: zero weight sum")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(batch)
    loss = -(sample_w * log_probs[rows, y]).sum() / total

    def rule(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, y] -= 1.0
        grad *= (sample_w / total)[:, None]
        return (grad * g,)

    return _emit("weighted_cross_entropy", (logits,), np.asarray(loss, dtype=logits.data.dtype), rule)


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Unweighted mean cross-entropy"""
    return weighted_cross_entropy(logits, labels, np.ones(logits.shape[-1]))


# Dispatch table for primitive_forward
PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "concatenate": lambda *ts, axis=0: concatenate(ts, axis=axis),
    "slice": slice_,
    "reshape": reshape,
    "flatten": flatten,
    "conv_time": conv_time,
    "dropout": dropout,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
    "layer_norm": layer_norm,
    "weighted_cross_entropy": weighted_cross_entropy,
}


def primitive_forward(op_kind: str, *inputs: Any, **attrs: Any) -> Tensor:
    """Apply a primitive by name, recording it on the active tape"""
    fn = PRIMITIVES.get(op_kind)
    if fn is None:
        raise KeyError(f"unknown primitive {op_kind!r}")
    return fn(*inputs, **attrs)


# =====================================================
# BACKWARD
# =====================================================

def backward(tape: Tape, loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """
    Propagate d(loss)/d(.) through the tape in reverse recording order.

    Every requires_grad leaf on the tape, plus any tensor listed in `leaves`,
    gets its `.grad` replaced; leaves the loss does not depend on get zeros.
    Returns the leaf-to-gradient mapping.
    """
    if loss.size != 1:
        raise NumericError(f"backward: loss must be scalar, got shape {loss.shape}")

    produced = {id(entry.output) for entry in tape.entries}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for operand, operand_grad in zip(entry.inputs, entry.backward_rule(g)):
            if operand_grad is None or not operand.requires_grad:
                continue
            key = id(operand)
            if key in grads:
                grads[key] = grads[key] + operand_grad
            else:
                grads[key] = operand_grad

    leaf_tensors: Dict[int, Tensor] = {}
    for entry in tape.entries:
        for operand in entry.inputs:
            if operand.requires_grad and id(operand) not in produced:
                leaf_tensors[id(operand)] = operand
    if id(loss) not in produced and loss.requires_grad:
        leaf_tensors[id(loss)] = loss
    for extra in leaves or ():
        leaf_tensors[id(extra)] = extra

    result: Dict[Tensor, np.ndarray] = {}
    for key, leaf in leaf_tensors.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        result[leaf] = leaf.grad
    return result
