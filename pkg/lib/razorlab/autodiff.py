"""
RazorLab - Numeric core

Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a Graph is active (``with Graph() as g:``) and
touching a tensor with ``requires_grad`` are appended to that graph;
``backward(g, root)`` walks the tape once in reverse insertion order.

Reductions add left to right (sequential_sum), so identical inputs give
bit-identical results. Matrix products go through numpy's matmul.
Every public operation checks its output for NaN/Inf and raises
NumericError instead of propagating them.
"""

import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from razorlab.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
)

DTYPE = np.float64

Number = Union[int, float]
GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def _check_finite(array: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{what} produced non-finite values")


class Tensor:
    """Dense row-major float64 array with an optional gradient accumulator"""

    __slots__ = ('data', 'grad', 'requires_grad', 'name')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=DTYPE)
        if array.size == 0:
            raise DimensionError("tensor must have at least one element")
        _check_finite(array, 'tensor construction')
        self.data = np.ascontiguousarray(array)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> 'Tensor':
        tensor = cls.__new__(cls)
        tensor.data = np.ascontiguousarray(array, dtype=DTYPE)
        tensor.grad = None
        tensor.requires_grad = requires_grad
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("tensors may only be divided by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class Node:
    """One recorded operation"""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: GradFn


class Graph:
    """
    Append-only tape of operations.

    Inputs of every node precede it, so reverse insertion order is a valid
    reverse topological order.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.root: Optional[Tensor] = None
        self._produced: set = set()
        self._leaves: List[Tensor] = []
        self._leaf_ids: set = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> 'Graph':
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Node) -> None:
        for tensor in node.inputs:
            key = id(tensor)
            if tensor.requires_grad and key not in self._produced and key not in self._leaf_ids:
                self._leaf_ids.add(key)
                self._leaves.append(tensor)
        self._produced.add(id(node.output))
        self.nodes.append(node)

    def leaves(self) -> List[Tensor]:
        """Tensors requiring grad that no recorded node produced, first-use order"""
        return list(self._leaves)


_local = threading.local()


def _stack() -> List[Graph]:
    if not hasattr(_local, 'stack'):
        _local.stack = []
    return _local.stack


def active_graph() -> Optional[Graph]:
    stack = _stack()
    return stack[-1] if stack else None


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, grad_fn: GradFn) -> Tensor:
    _check_finite(out, op)
    graph = active_graph()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=tracked)
    if tracked:
        graph.record(Node(op, tuple(inputs), result, grad_fn))
    return result


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# =============================================================================
# Backward
# =============================================================================

def backward(graph: Graph, root: Tensor) -> Dict[str, np.ndarray]:
    """
    Reverse-mode pass from a scalar root.

    Accumulates into ``grad`` of every leaf tensor and returns the
    gradients of named leaves by name. Leaves the root does not depend on
    get zero gradients.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    graph.root = root

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        upstream = grads.pop(id(node.output), None)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            _check_finite(grad, f'{node.op} backward')
            key = id(tensor)
            grads[key] = grads[key] + grad if key in grads else grad

    leaves = graph.leaves()
    if root.requires_grad and id(root) not in graph._produced and id(root) not in graph._leaf_ids:
        leaves.append(root)

    result: Dict[str, np.ndarray] = {}
    for leaf in leaves:
        grad = grads.get(id(leaf))
        if grad is None:
            grad = np.zeros_like(leaf.data)
        grad = np.ascontiguousarray(grad.reshape(leaf.shape), dtype=DTYPE)
        leaf.grad = grad.copy() if leaf.grad is None else leaf.grad + grad
        if leaf.name is not None:
            result[leaf.name] = grad
    return result


# =============================================================================
# Elementwise arithmetic
# =============================================================================

def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return 'same'
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return 'trailing'
    raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def sequential_sum(data: np.ndarray, axis: Optional[int] = None, keepdims: bool = False) -> np.ndarray:
    """
    Left-to-right sum along ``axis`` (all elements in C order when None),
    one element at a time via ``np.add.accumulate``.
    """
    data = np.asarray(data, dtype=DTYPE)
    if axis is None:
        flat = data.reshape(-1)
        total = np.add.accumulate(flat)[-1] if flat.size else DTYPE(0.0)
        return np.full((1,) * data.ndim, total) if keepdims else np.asarray(total)
    if data.shape[axis] == 0:
        return np.zeros_like(np.sum(data, axis=axis, keepdims=keepdims))
    out = np.take(np.add.accumulate(data, axis=axis), [-1], axis=axis)
    return out if keepdims else np.squeeze(out, axis=axis)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return sequential_sum(grad.reshape((-1,) + shape), axis=0) if lead > 0 else grad


def add(a: Tensor, b: Union[Tensor, Number]) -> Tensor:
    """a + b; b may be a scalar or a trailing-shape bias (per-row bias, positional table)"""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        offset = float(b)
        return _record('add', (a,), a.data + offset, lambda g: (g,))
    b = _as_tensor(b)
    _broadcast_kind(a, b, 'add')
    shape_b = b.shape
    return _record('add', (a, b), a.data + b.data, lambda g: (g, _reduce_to(g, shape_b)))


def sub(a: Tensor, b: Union[Tensor, Number]) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = _as_tensor(b)
    _broadcast_kind(a, b, 'sub')
    shape_b = b.shape
    return _record('sub', (a, b), a.data - b.data, lambda g: (g, -_reduce_to(g, shape_b)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b may be a trailing-shape vector (layer-norm gain)"""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a, b, 'mul')
    a_data, b_data = a.data, b.data
    return _record(
        'mul', (a, b), a_data * b_data,
        lambda g: (g * b_data, _reduce_to(g * a_data, b_data.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _record('scale', (a,), a.data * factor, lambda g: (g * factor,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record('exp', (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DegenerateInputError("log of a non-positive value")
    data = a.data
    return _record('log', (a,), np.log(data), lambda g: (g / data,))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record('tanh', (a,), out, lambda g: (g * (1.0 - out * out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation, with its exact derivative"""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_K * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record('gelu', (a,), out, grad_fn)


# =============================================================================
# Linear algebra and shape
# =============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product.

    (m,k)@(k,n) is the base case; (...,m,k)@(k,n) shares the right operand
    across leading axes and (B,m,k)@(B,k,n) multiplies batch-wise.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        k, n = b.shape

        def grad_fn(g):
            grad_a = g @ b_data.T
            grad_b = a_data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b

        return _record('matmul', (a, b), a_data @ b_data, grad_fn)

    if a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"batched matmul shapes differ: {a.shape} @ {b.shape}")

        def grad_fn(g):
            return g @ b_data.transpose(0, 2, 1), a_data.transpose(0, 2, 1) @ g

        return _record('matmul', (a, b), np.matmul(a_data, b_data), grad_fn)

    raise DimensionError(f"unsupported matmul shapes {a.shape} @ {b.shape}")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        if a.ndim != 2:
            raise DimensionError("transpose without axes needs a matrix")
        axes = (1, 0)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _record('transpose', (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    original = a.shape
    return _record('reshape', (a,), out, lambda g: (g.reshape(original),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis of size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _record('slice', (a,), a.data[index], grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes differ: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record('concat', tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)"""
    table = _as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("take_rows needs a 2-D table")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise DimensionError("row index out of range")
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record('take_rows', (table,), table.data[indices], grad_fn)


def diagonal(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {a.shape}")
    return _record('diagonal', (a,), np.diagonal(a.data).copy(), lambda g: (np.diag(g),))


# =============================================================================
# Reductions
# =============================================================================

def _expand(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = sequential_sum(a.data, axis=axis, keepdims=keepdims)
    return _record('sum', (a,), np.asarray(out), lambda g: (_expand(g, shape, axis, keepdims),))


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    out = sequential_sum(a.data, axis=axis, keepdims=keepdims) / count
    return _record(
        'mean', (a,), np.asarray(out),
        lambda g: (_expand(g, shape, axis, keepdims) / count,),
    )


# =============================================================================
# Row-wise operations (last axis)
# =============================================================================

def _require_rows(a: Tensor, op: str) -> None:
    if a.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"{op} needs a non-empty last dimension")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction"""
    a = _as_tensor(a)
    _require_rows(a, 'softmax_rows')
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / sequential_sum(e, axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - sequential_sum(g * out, axis=-1, keepdims=True)),)

    return _record('softmax_rows', (a,), out, grad_fn)


def log_softmax_rows(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _require_rows(a, 'log_softmax_rows')
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    lse = np.log(sequential_sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * sequential_sum(g, axis=-1, keepdims=True),)

    return _record('log_softmax_rows', (a,), out, grad_fn)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale each row (last axis) to unit L2 norm"""
    a = _as_tensor(a)
    _require_rows(a, 'l2_normalize')
    norms = np.sqrt(sequential_sum(a.data * a.data, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero vector")
    out = a.data / norms

    def grad_fn(g):
        return ((g - out * sequential_sum(g * out, axis=-1, keepdims=True)) / norms,)

    return _record('l2_normalize', (a,), out, grad_fn)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_dot shapes differ: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    out = sequential_sum(a_data * b_data, axis=-1)

    def grad_fn(g):
        g = g[..., None]
        return g * b_data, g * a_data

    return _record('rowwise_dot', (a, b), np.asarray(out), grad_fn)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity along the last axis"""
    return rowwise_dot(l2_normalize(a), l2_normalize(b))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and bias"""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(f"layer_norm parameters must have shape ({width},)")
    centered = x.data - sequential_sum(x.data, axis=-1, keepdims=True) / width
    variance = sequential_sum(centered * centered, axis=-1, keepdims=True) / width
    inv_std = 1.0 / np.sqrt(variance + eps)
    x_hat = centered * inv_std
    gain_data = gain.data
    out = x_hat * gain_data + bias.data

    def grad_fn(g):
        grad_gain = _reduce_to(g * x_hat, (width,))
        grad_bias = _reduce_to(g, (width,))
        d_hat = g * gain_data
        mean_d = sequential_sum(d_hat, axis=-1, keepdims=True) / width
        mean_dx = sequential_sum(d_hat * x_hat, axis=-1, keepdims=True) / width
        grad_x = inv_std * (d_hat - mean_d - x_hat * mean_dx)
        return grad_x, grad_gain, grad_bias

    return _record('layer_norm', (x, gain, bias), out, grad_fn)
