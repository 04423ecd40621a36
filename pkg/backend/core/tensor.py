"""
Dense float64 tensors with reverse-mode automatic differentiation.

Each operation records its parents and a backward function that maps the
gradient of its output to one gradient per parent. `Tensor.backward()` walks
the recorded graph in reverse topological order.

Rules the engine enforces:
- no implicit broadcasting: binary elementwise operands must share a shape,
  callers expand explicitly with `expand_rows` / `expand_cols` / `expand_scalar`;
- every op result is checked for NaN/Inf and raises `NonFiniteError`;
- a graph can be differentiated once; a second `backward()` on it, or a
  backward while parameters still hold gradients, raises `GraphStateError`.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    GraphStateError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")


class Tensor:
    """A numpy array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        op: str,
        backward: BackwardFn,
    ) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Operator sugar; all of it routes through the explicit ops below.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return getitem(self, key)

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate `.grad` on every tensor this scalar depends on."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        order = self._topological_order()
        for node in order:
            if node._consumed:
                raise GraphStateError("graph was already consumed by an earlier backward()")
            if node.grad is not None:
                raise GraphStateError(
                    "gradients from an earlier backward() are still present; call zero_grad() first"
                )

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=np.float64).reshape(parent.data.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad = parent.grad + g

        for node in order:
            if node._backward is not None:
                node._consumed = True


def constant(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data: ArrayLike) -> Tensor:
    return Tensor(data, requires_grad=True)


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data
    return Tensor._from_op(a_data * b_data, (a, b), "mul", lambda g: (g * b_data, g * a_data))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), "neg", lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor._from_op(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form stays finite for any input and gives sigmoid(0) == 0.5 exactly
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._from_op(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return Tensor._from_op(
        np.where(positive, a.data, 0.0), (a,), "relu", lambda g: (g * positive,)
    )


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return Tensor._from_op(y, (a,), "exp", lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return Tensor._from_op(y, (a,), "log", lambda g: (g / x,))


_ELEMENTWISE = {
    "add": (add, 2),
    "sub": (sub, 2),
    "mul": (mul, 2),
    "neg": (neg, 1),
    "tanh": (tanh, 1),
    "sigmoid": (sigmoid, 1),
    "relu": (relu, 1),
    "exp": (exp, 1),
    "log": (log, 1),
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    """Dispatch a pointwise op by name: add, sub, mul, neg, tanh, sigmoid, relu, exp, log."""
    try:
        fn, arity = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op}'") from None
    if len(operands) != arity:
        raise ContractError(f"'{op}' takes {arity} operand(s), got {len(operands)}")
    return fn(*operands)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors act as row / column)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul: operands must be 1-D or 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")

    a2 = a.data if a.ndim == 2 else a.data.reshape(1, -1)
    b2 = b.data if b.ndim == 2 else b.data.reshape(-1, 1)
    out2 = a2 @ b2
    out_shape = a.shape[:-1] + b.shape[1:]

    def backward(g: np.ndarray):
        g2 = g.reshape(out2.shape)
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return Tensor._from_op(out2.reshape(out_shape), (a, b), "matmul", backward)


def outer_product(f: Tensor, q: Tensor) -> Tensor:
    """X[i, j] = f[i] * q[j] for two vectors of equal length."""
    f, q = _as_tensor(f), _as_tensor(q)
    if f.ndim != 1 or q.ndim != 1 or f.shape != q.shape:
        raise DimensionError(f"outer_product: need two vectors of equal length, got {f.shape} and {q.shape}")
    f_data, q_data = f.data, q.data
    return Tensor._from_op(
        np.outer(f_data, q_data),
        (f, q),
        "outer",
        lambda g: (g @ q_data, g.T @ f_data),
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim == 1:
        return a
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D tensor, got {a.shape}")
    return Tensor._from_op(a.data.T.copy(), (a,), "transpose", lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    in_shape = a.shape
    return Tensor._from_op(out.copy(), (a,), "reshape", lambda g: (g.reshape(in_shape),))


def _is_fancy(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    """Index with ints, slices or integer arrays; repeated indices accumulate gradient."""
    try:
        out = np.array(a.data[key], dtype=np.float64)
    except IndexError as exc:
        raise DimensionError(f"index {key!r} out of range for shape {a.shape}: {exc}") from None
    fancy = _is_fancy(key)
    in_shape = a.shape

    def backward(g: np.ndarray):
        grad = np.zeros(in_shape)
        if fancy:
            np.add.at(grad, key, g)
        else:
            grad[key] += g
        return (grad,)

    return Tensor._from_op(out, (a,), "getitem", backward)


def take_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    return getitem(a, np.asarray(indices, dtype=np.intp))


def expand_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector of length d as the n rows of an (n, d) matrix."""
    if v.ndim != 1:
        raise DimensionError(f"expand_rows: expected a vector, got {v.shape}")
    return take_rows(reshape(v, (1, v.shape[0])), np.zeros(n, dtype=np.intp))


def expand_cols(v: Tensor, d: int) -> Tensor:
    """Repeat a vector of length n as the d columns of an (n, d) matrix."""
    if v.ndim != 1:
        raise DimensionError(f"expand_cols: expected a vector, got {v.shape}")
    column = reshape(v, (v.shape[0], 1))
    return getitem(column, (slice(None), np.zeros(d, dtype=np.intp)))


def expand_scalar(s: Tensor, n: int) -> Tensor:
    """Repeat a single-value tensor into a vector of length n."""
    if s.size != 1:
        raise DimensionError(f"expand_scalar: expected a single value, got {s.shape}")
    return take_rows(reshape(s, (1,)), np.zeros(n, dtype=np.intp))


def scatter_rows(a: Tensor, positions: Sequence[int], n: int) -> Tensor:
    """Place the rows of `a` at `positions` of an n-row matrix; other rows are zero."""
    positions = np.asarray(positions, dtype=np.intp)
    if a.ndim != 2 or positions.shape != (a.shape[0],):
        raise DimensionError(f"scatter_rows: {a.shape} rows vs {positions.shape} positions")
    if positions.size and (positions.min() < 0 or positions.max() >= n or np.unique(positions).size != positions.size):
        raise ContractError("scatter_rows: positions must be distinct and inside the output")
    out = np.zeros((n, a.shape[1]))
    out[positions] = a.data
    return Tensor._from_op(out, (a,), "scatter_rows", lambda g: (g[positions],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    ndim = tensors[0].ndim
    if ndim == 0 or any(t.ndim != ndim for t in tensors):
        raise DimensionError(f"concat: rank mismatch {[t.shape for t in tensors]}")
    if not -ndim <= axis < ndim:
        raise DimensionError(f"concat: axis {axis} out of range for rank {ndim}")
    axis = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if any(t.shape[d] != ref[d] for d in range(ndim) if d != axis):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")

    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def reduce(t: Tensor, op: str, axis: Optional[int] = None) -> Tensor:
    """Sum, mean or max over one axis (or everything when axis is None)."""
    if op not in ("sum", "mean", "max"):
        raise ContractError(f"unknown reduction '{op}'")
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"reduce: axis {axis} out of range for shape {t.shape}")
    if t.size == 0 and op != "sum":
        raise DegenerateInputError(f"reduce '{op}' over an empty tensor")
    in_shape = t.shape
    count = t.size if axis is None else t.shape[axis]

    if op == "sum":
        out = t.data.sum(axis=axis)
    elif op == "mean":
        out = t.data.mean(axis=axis)
    else:
        out = t.data.max(axis=axis)

    def backward(g: np.ndarray):
        g_full = g if axis is None else np.expand_dims(g, axis)
        if op == "max":
            flat = t.data.reshape(-1) if axis is None else t.data
            winner = np.zeros_like(flat)
            if axis is None:
                winner[np.argmax(flat)] = 1.0
                return (winner.reshape(in_shape) * g,)
            np.put_along_axis(winner, np.expand_dims(np.argmax(flat, axis=axis), axis), 1.0, axis=axis)
            return (winner * g_full,)
        grad = np.broadcast_to(g_full, in_shape).copy()
        if op == "mean":
            grad /= count
        return (grad,)

    return Tensor._from_op(out, (t,), f"reduce_{op}", backward)


def reduce_sum(t: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce(t, "sum", axis)


def reduce_mean(t: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce(t, "mean", axis)


def reduce_max(t: Tensor, axis: Optional[int] = None) -> Tensor:
    return reduce(t, "max", axis)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def softmax_masked(scores: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over a vector, or independently over each row of a matrix,
    restricted to entries where `mask` is True.

    Masked outputs are exactly 0; the maximum unmasked score of each row is
    subtracted before exponentiation.
    """
    if scores.ndim not in (1, 2):
        raise DimensionError(f"softmax_masked: expected a vector or matrix, got {scores.shape}")
    keep = np.ones(scores.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != scores.shape:
        raise DimensionError(f"softmax_masked: mask shape {keep.shape} vs scores {scores.shape}")
    if not keep.any(axis=-1).all():
        raise DegenerateInputError("softmax_masked: every entry is masked")

    x = scores.data
    top = np.where(keep, x, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, x - top, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (scores,), "softmax", backward)
