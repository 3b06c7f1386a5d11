"""
tensor_core.py - Dense float64 arrays with reverse-mode automatic differentiation

Every learnable quantity in the pipeline (embeddings, attention projections,
LSTM gates, the pose regressor) is a Tensor. Operations record their parents
and a backward closure; GradTape orders the recorded graph and replays it in
reverse to apply the chain rule.

Gradients accumulate: calling backward twice without zero_grad adds the two
passes together.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Mapping, Sequence

import numpy as np
from scipy.special import expit

from constants import LAYER_NORM_EPS
from exceptions import ContractError, DimensionError, MalformedInputError

logger = logging.getLogger(__name__)

_grad_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def grad_enabled() -> bool:
    """Whether new operations are being recorded on this thread."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on the current thread (inference, metrics)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar
    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, axis1: int, axis2: int) -> Tensor:
        return swapaxes(self, axis1, axis2)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(value) -> Tensor:
    """Wrap constants; Tensors pass through untouched."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward_fn if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible",
            shapes=(a.shape, b.shape),
        ) from e


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def backward_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward_fn)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), backward_fn)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), backward_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def backward_fn(g):
        return (g * positive,)

    return _result(np.where(positive, x.data, 0.0), (x,), backward_fn)


def softplus(x) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (g * expit(x.data),)

    return _result(np.logaddexp(0.0, x.data), (x,), backward_fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def backward_fn(g):
        return (g * y,)

    return _result(y, (x,), backward_fn)


def log(x) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward_fn)


# ---------------------------------------------------------------- reductions / shape

def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}", shapes=(x.shape, shape)) from e

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), backward_fn)


def swapaxes(x, axis1: int, axis2: int) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        return (np.swapaxes(g, axis1, axis2),)

    return _result(np.swapaxes(x.data, axis1, axis2), (x,), backward_fn)


def _is_basic_index(index) -> bool:
    """Slices, ints, Ellipsis and None never select an entry twice."""
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    basic = _is_basic_index(index)

    def backward_fn(g):
        full = np.zeros(x.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward_fn)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(
            f"concat: incompatible shapes {[p.shape for p in parts]}",
            shapes=tuple(p.shape for p in parts),
        ) from e
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(data, parts, backward_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(
            f"stack: incompatible shapes {[p.shape for p in parts]}",
            shapes=tuple(p.shape for p in parts),
        ) from e

    def backward_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _result(data, parts, backward_fn)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.

    Backward accumulates dA = dC·Bᵀ and dB = Aᵀ·dC (summed over broadcast axes).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: shape mismatch {a.shape} @ {b.shape}",
            shapes=(a.shape, b.shape),
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast",
            shapes=(a.shape, b.shape),
        ) from e

    def backward_fn(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(data, (a, b), backward_fn)


# ---------------------------------------------------------------- softmax / norm

def _softmax_backward(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    return y * (g - np.sum(g * y, axis=axis, keepdims=True))


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; slices along axis sum to one."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (_softmax_backward(y, g, axis),)

    return _result(y, (x,), backward_fn)


def masked_softmax(x, mask: np.ndarray, axis: int = -1) -> Tensor:
    """
    Softmax with disallowed entries filled with -inf before normalisation.

    Masked entries come out exactly 0 and receive zero gradient. A slice with
    no allowed entry yields all zeros.
    """
    x = as_tensor(x)
    allowed = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    scores = np.where(allowed, x.data, -np.inf)
    peak = np.max(scores, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.where(allowed, np.exp(scores - peak), 0.0)
    total = np.sum(e, axis=axis, keepdims=True)
    y = e / np.where(total > 0, total, 1.0)

    def backward_fn(g):
        return (_softmax_backward(y, g, axis),)

    return _result(y, (x,), backward_fn)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the affine gamma/beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape[-1:] != x.shape[-1:] or beta.shape[-1:] != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: feature axis {x.shape[-1:]} vs gamma {gamma.shape} / beta {beta.shape}",
            shapes=(x.shape, gamma.shape, beta.shape),
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward_fn(g):
        g_hat = g * gamma.data
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, _unbroadcast(g * x_hat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result(gamma.data * x_hat + beta.data, (x, gamma, beta), backward_fn)


# ---------------------------------------------------------------- tape

@dataclass
class GradTape:
    """Topologically ordered record of the operations reachable from a root."""

    nodes: List[Tensor]

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        """Post-order DFS over parents (iterative; decoder graphs run deep)."""
        order: List[Tensor] = []
        visited: set[int] = set()
        stack_: List[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack_.append((parent, False))
        return cls(order)

    def replay(self, seed: np.ndarray) -> None:
        """Apply the chain rule from the last node back to the leaves."""
        if not self.nodes:
            return
        pending: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64)
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def backward(loss: Tensor) -> None:
    """
    Populate .grad on every requires_grad ancestor of a scalar loss.

    Raises:
        ContractError: If loss is not a scalar or is not connected to a tape.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any tensor that requires grad")
    GradTape.record(loss).replay(np.ones(loss.shape))


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- checks / io

def numerical_gradient(
    fn: Callable[[], float],
    tensor: Tensor,
    h: float = 1e-4,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """
    Central finite differences of a scalar function w.r.t. tensor entries.

    The tensor's data is perturbed in place and restored. Entries not listed
    in indices are left as NaN.
    """
    grad = np.full(tensor.shape, np.nan)
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    for idx in indices:
        original = tensor.data[idx]
        tensor.data[idx] = original + h
        upper = fn()
        tensor.data[idx] = original - h
        lower = fn()
        tensor.data[idx] = original
        grad[idx] = (upper - lower) / (2.0 * h)
    return grad


def save_tensors(path: Path, tensors: Mapping[str, Tensor]) -> None:
    """Write {name: {shape, data}} JSON with sorted keys."""
    payload = {
        name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in tensors.items()
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True))


def load_tensors(path: Path, requires_grad: bool = True) -> dict[str, Tensor]:
    """Read tensors written by save_tensors."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedInputError(f"Cannot read weights from {path}: {e}") from e
    tensors: dict[str, Tensor] = {}
    for name in sorted(payload):
        entry = payload[name]
        shape = tuple(int(s) for s in entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != math.prod(shape):
            raise MalformedInputError(
                f"Weight {name} in {path}: shape {shape} does not hold {data.size} values"
            )
        tensors[name] = Tensor(data.reshape(shape), requires_grad=requires_grad)
    return tensors
