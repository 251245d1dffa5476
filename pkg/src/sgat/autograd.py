"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every differentiable operation executed while a :class:`Tape` is active (and
with at least one input that requires a gradient) is appended to that tape.
``Tape.backward`` then walks the recorded operations in exact reverse order.
Outside of an active tape nothing is recorded, which makes evaluation passes
cheap::

    with Tape() as tape:
        loss = mean(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad  # dloss/dw

Gradients of leaf tensors accumulate across ``backward`` calls and must be
cleared with :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DomainError, ShapeError, StructuralError

_seq = itertools.count()
_active_tapes: list["Tape"] = []


class Tensor:
    """A dense 2-D float64 matrix that may carry a gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "_node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be at most 2-D, got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._node is None:
            raise ContractError("backward() called on a tensor that no tape recorded")
        self._node.tape.backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731


@dataclass(eq=False)
class _Node:
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape: "Tape"
    seq: int
    op: str


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self) -> None:
        self.ops: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1):
            raise ContractError(f"backward() needs a scalar (1x1) loss, got {loss.shape}")
        if not self.ops:
            raise ContractError("backward() on an empty tape")
        if loss._node is None or loss._node.tape is not self:
            raise ContractError("loss was not produced by operations on this tape")
        # Non-leaf buffers are scratch space for this pass; leaves accumulate.
        for node in self.ops:
            node.out.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.ops):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad += gi


def current_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(values: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._node = None
    out.name = None
    tape = current_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = _Node(tuple(inputs), out, backward, tape, next(_seq), op)
        out._node = node
        tape.ops.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.values, b.values

    def backward(g):
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), backward, "matmul")


def spmm_aggregate(graph, edge_weights: Tensor, h: Tensor) -> Tensor:
    """Weighted neighbour sum ``out[i] = sum_{e=(i,j)} w[e] * h[j]`` in CSR edge order."""
    n = graph.n_nodes
    row_ptr = np.asarray(graph.row_ptr)
    col_idx = np.asarray(graph.col_idx)
    n_edges = col_idx.shape[0]
    if row_ptr.shape[0] != n + 1 or row_ptr[0] != 0 or row_ptr[-1] != n_edges:
        raise StructuralError("spmm_aggregate: row_ptr is inconsistent with col_idx")
    if n_edges and (col_idx.min() < 0 or col_idx.max() >= n):
        raise StructuralError("spmm_aggregate: neighbour index out of bounds")
    if edge_weights.shape != (n_edges, 1):
        raise ShapeError(f"spmm_aggregate: edge weights {edge_weights.shape}, expected ({n_edges}, 1)")
    if h.rows != n:
        raise ShapeError(f"spmm_aggregate: features {h.shape} but graph has {n} nodes")
    w = edge_weights.values[:, 0]
    hv = h.values
    adj = sp.csr_matrix((w, col_idx, row_ptr), shape=(n, n))
    src = graph.edge_src

    def backward(g):
        gw = np.einsum("ij,ij->i", g[src], hv[col_idx])
        return gw[:, None], adj.T @ g

    return _record(np.asarray(adj @ hv), (edge_weights, h), backward, "spmm")


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.values + b.values, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record(a.values - b.values, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    return _record(-a.values, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(av * bv, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv

    def backward(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _record(out, (a, b), backward, "div")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.values)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _record(a.values * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.values > 0, 1.0, slope)
    return _record(a.values * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    return _record(np.log(av), (a,), lambda g: (g / av,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """``min(hi, max(lo, a))``; zero gradient wherever clipping is active."""
    inside = (a.values > lo) & (a.values < hi)
    return _record(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- shape and reductions ----------------------------------------------------------


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    rows = {t.rows for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def backward(g):
        return [g[:, bounds[k]:bounds[k + 1]] for k in range(len(tensors))]

    return _record(np.hstack([t.values for t in tensors]), tensors, backward, "concat_cols")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _record(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def mean(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.values.size
    return _record(
        np.array([[a.values.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),), "mean"
    )


def row_softmax(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (a,), backward, "row_softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _record(out, (a,), backward, "log_softmax")


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.values[idx], (a,), backward, "gather_rows")


def scatter_add_rows(a: Tensor, idx, n_rows: int) -> Tensor:
    """``out[idx[k]] += a[k]``; the adjoint of :func:`gather_rows`."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != a.rows:
        raise ShapeError(f"scatter_add_rows: {idx.shape[0]} indices for {a.rows} rows")
    out = np.zeros((n_rows, a.cols))
    np.add.at(out, idx, a.values)
    return _record(out, (a,), lambda g: (g[idx],), "scatter_add_rows")


def select(a: Tensor, rows, cols) -> Tensor:
    """Pick entries ``a[rows[k], cols[k]]`` into a column vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _record(a.values[rows, cols][:, None], (a,), backward, "select")


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.values * keep, (a,), lambda g: (g * keep,), "dropout")
