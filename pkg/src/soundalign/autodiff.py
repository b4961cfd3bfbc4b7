"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is dynamic: each operation returns a new :class:`Tensor` holding
references to its inputs and a closure that pushes the upstream gradient
back to them. :meth:`Tensor.backward` walks the graph in reverse
topological order.

Only what the alignment model needs is provided: matrix products, row
softmax, GELU, slicing/concatenation for multi-head attention, and MSE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Args:
        data: Anything ``np.asarray`` accepts; copied to float64.
        requires_grad: Whether gradients should be accumulated into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward: Callable | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        backward(self)

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = True
    out.grad = None  # interior nodes get a buffer lazily during backward
    out.op = op
    out._parents = parents
    out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


@dataclass(frozen=True)
class Node:
    """One record of a traced graph: op kind, input ids and output id."""

    op: str
    inputs: tuple[int, ...]
    output: int


def topological_order(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def trace(root: Tensor) -> list[Node]:
    """Flatten the graph behind ``root`` into ordered :class:`Node` records."""
    order = topological_order(root)
    ids = {id(t): i for i, t in enumerate(order)}
    return [Node(t.op, tuple(ids[id(p)] for p in t._parents), ids[id(t)]) for t in order]


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    interior = [t for t in order if t._backward is not None]
    # interior buffers are scratch space for this pass only
    for t in interior:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in interior:
        if t is not loss:
            t.grad = None


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), _back)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast along leading axes (bias rows)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out_shape != a.shape and out_shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def _back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), _back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def _back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, "sub", (a, b), _back)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def _back(g):
        _accumulate(a, g * s)

    return _make(a.data * s, "scale", (a,), _back)


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def _back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(x * cdf, "gelu", (a,), _back)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {a.shape}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def _back(g):
        _accumulate(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _make(s, "softmax_rows", (a,), _back)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def _back(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), "transpose", (a,), _back)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def _back(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(data.copy(), "reshape", (a,), _back)


def rows(a, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a matrix."""
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"rows: slice {start}:{stop} out of range for {a.shape}")

    def _back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _make(a.data[start:stop].copy(), "rows", (a,), _back)


def cols(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of a matrix."""
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"cols: slice {start}:{stop} out of range for {a.shape}")

    def _back(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _make(a.data[:, start:stop].copy(), "cols", (a,), _back)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: nothing to concatenate")
    if any(p.data.ndim != 2 or p.shape[0] != parts[0].shape[0] for p in parts):
        raise ShapeError("concat_cols: parts must be matrices with equal row counts")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def _back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(p, g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), "concat_cols", tuple(parts), _back)


def mean_rows(a) -> Tensor:
    """Average over rows: [p x d] -> [1 x d]."""
    a = as_tensor(a)
    n = a.shape[0]

    def _back(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(a.data.mean(axis=0, keepdims=True), "mean_rows", (a,), _back)


def total(parts: Iterable[Tensor]) -> Tensor:
    """Sum of scalar tensors, accumulated left to right."""
    parts = [as_tensor(p) for p in parts]
    acc = parts[0].data.copy()
    for p in parts[1:]:
        acc = acc + p.data

    def _back(g):
        for p in parts:
            _accumulate(p, np.broadcast_to(g, p.shape))

    return _make(acc, "total", tuple(parts), _back)


def mse(a, b) -> Tensor:
    """Mean over all elements of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def _back(g):
        d = (2.0 / n) * diff * g
        _accumulate(a, d)
        _accumulate(b, -d)

    return _make(np.array(np.mean(diff * diff)), "mse", (a, b), _back)


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn().item()
        flat[i] = orig - eps
        minus = fn().item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the graph on each call and return a scalar tensor.
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        worst = max(worst, relative_error(ga, numerical_grad(fn, p, eps)))
    return worst
