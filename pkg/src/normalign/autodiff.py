"""Minimal reverse-mode autodiff over dense float64 arrays.

Covers exactly the operations the losses and models need: matmul, the usual
elementwise ops, row-wise reductions, softmax / log-softmax, row L2 norms,
gradient reversal, and a couple of gather primitives. Graphs are define-by-run
and single-use: one forward pass, one backward pass, then you build a new one.

All math is float64. Reductions are sequential numpy reductions, so repeated
runs on identical inputs are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

# Smoothing constant under the row-norm square root; keeps the norm (and its
# gradient) finite on all-zero rows. A zero row reports norm sqrt(EPS_NORM).
EPS_NORM = 1e-12

# Floor applied by clamp-based log-probability guards downstream.
LOG_FLOOR = float(np.log(1e-12))


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values outside the mathematical domain of the operation."""


class GraphError(RuntimeError):
    """Autodiff graph misuse (backward replay, non-scalar root, ...)."""


class Tensor:
    """A dense float64 array plus the bookkeeping for one backward pass.

    ``data`` is treated as immutable after construction; optimizer updates
    create fresh tensors. ``grad`` is populated (as a plain ndarray of the
    same shape) by ``backward`` for every tensor with ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Accumulates total adjoints into ``grad`` of every reachable tensor
        with ``requires_grad``. The op nodes of the graph are consumed: a
        second backward over any of them raises ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")

        order = _toposort(self)
        for node in order:
            if node._backward_fn is not None and node._consumed:
                raise GraphError("graph already consumed by a previous backward; rerun the forward pass")

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is None:
                continue
            node._consumed = True
            if node.grad is None:
                # No adjoint reached this node (dead branch); nothing to push.
                continue
            node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __pow__(self, exponent: float):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _toposort(root: Tensor) -> list[Tensor]:
    """Post-order over the parent DAG, iterative to spare the recursion limit."""
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


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# -- elementwise and broadcast arithmetic ----------------------------------

def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # Remaining supported case: (n, d) reduced onto (d,) bias-style operands.
    return g.sum(axis=0)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward_fn)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return mul(a, _wrap(float(c)))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward_fn)


# -- matrix product ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward_fn)


# -- elementwise nonlinearities ----------------------------------------------

def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is defined as 0 (mask is strict).
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out_data = np.log(a.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward_fn)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes where a >= floor."""
    floor = float(floor)
    mask = a.data >= floor
    out_data = np.where(mask, a.data, floor)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), backward_fn)


# -- reductions ---------------------------------------------------------------

def mean(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.mean())
    n = a.data.size

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g) / n))

    return _make(out_data, (a,), backward_fn)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(a.data.sum())

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _make(out_data, (a,), backward_fn)


def sum_rows(a: Tensor) -> Tensor:
    """Row sums of a 2-D tensor: [n, d] -> [n]."""
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a 2-D tensor, got {a.shape}")
    out_data = a.data.sum(axis=1)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.repeat(g[:, None], a.shape[1], axis=1))

    return _make(out_data, (a,), backward_fn)


# -- shape ops -----------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].data.ndim
    if any(t.data.ndim != ndim for t in tensors):
        raise ShapeError("concat: mixed ranks")
    if axis not in (0, 1) or axis >= ndim:
        raise ShapeError(f"concat: unsupported axis {axis} for rank {ndim}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                continue
            if axis == 0:
                t._accumulate(g[lo:hi])
            else:
                t._accumulate(g[:, lo:hi])

    return _make(out_data, tuple(tensors), backward_fn)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; adjoint scatter-adds back."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out_data = a.data[idx]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)

    return _make(out_data, (a,), backward_fn)


def take_per_row(a: Tensor, columns) -> Tensor:
    """Pick one column per row of a 2-D tensor: [n, d], [n] -> [n]."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row expects a 2-D tensor, got {a.shape}")
    cols = np.asarray(columns, dtype=np.intp)
    if cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: need one column index per row, got {cols.shape} for {a.shape}")
    rows = np.arange(a.shape[0])
    out_data = a.data[rows, cols]

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[rows, cols] = g
            a._accumulate(ga)

    return _make(out_data, (a,), backward_fn)


# -- row-wise softmax family -----------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Row softmax of [n, C] with the max-shift trick."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax expects a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            inner = (g * s).sum(axis=1, keepdims=True)
            a._accumulate(s * (g - inner))

    return _make(s, (a,), backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax expects a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g - soft * g.sum(axis=1, keepdims=True))

    return _make(out_data, (a,), backward_fn)


# -- norms and gradient reversal ----------------------------------------------

def l2_norm_rows(a: Tensor) -> Tensor:
    """Per-row Euclidean norm of [n, d], smoothed so zero rows stay differentiable.

    Computes sqrt(sum(x^2) + EPS_NORM); an all-zero row reports sqrt(EPS_NORM)
    instead of producing a NaN gradient.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"l2_norm_rows expects a 2-D tensor, got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1) + EPS_NORM)

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate((g / norms)[:, None] * a.data)

    return _make(norms, (a,), backward_fn)


def grad_reverse(a: Tensor, lambda_d: float) -> Tensor:
    """Identity forward; backward scales the adjoint by -lambda_d."""
    lam = float(lambda_d)
    if lam < 0:
        raise DomainError(f"grad_reverse requires lambda_d >= 0, got {lam}")

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(-lam * g)

    return _make(a.data, (a,), backward_fn)


def backward(loss: Tensor) -> None:
    loss.backward()
