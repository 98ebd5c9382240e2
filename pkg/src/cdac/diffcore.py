"""Minimal define-by-run reverse-mode differentiation over float64 arrays.

Only the primitives the model and the losses need are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a local
backward rule; :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class GraphError(RuntimeError):
    """Raised for invalid backward passes (non-scalar loss, reused graph)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every graph tensor that requires it.

        Leaf gradients accumulate across calls; interior gradients are overwritten.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node._consumed:
                raise GraphError("graph already used by a backward pass; rebuild it with a new forward")
        if not self.requires_grad:
            for node in order:
                if node._parents:
                    node._consumed = True
            return

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._parents:
                node._consumed = True
            if g is None or not node.requires_grad:
                continue
            if node.is_leaf:
                node.grad = node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.op = op
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    out._consumed = False
    return out


def _require_2d(op: str, t: Tensor) -> None:
    if t.data.ndim != 2:
        raise ShapeError(op, t.shape)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may also be a scalar or a row vector added to each row of ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:
        mode = "same"
    elif b.data.ndim == 0:
        mode = "scalar"
    elif a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        mode = "row"
    else:
        raise ShapeError("add", a.shape, b.shape)

    def backward(g):
        if mode == "same":
            return g, g
        if mode == "scalar":
            return g, np.asarray(g.sum())
        return g, g.sum(axis=0)

    return _make(a.data + b.data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, "mul", (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * x.data * g,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input; clamp before taking the log")
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero where clipping was active."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements (named to avoid shadowing the builtin)."""
    shape = x.shape
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _make(np.asarray(x.data.mean()), "mean", (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sum_rows(x: Tensor) -> Tensor:
    """Per-row sum of a matrix, shape (n,)."""
    _require_2d("sum_rows", x)
    cols = x.shape[1]
    return _make(x.data.sum(axis=1), "sum_rows", (x,), lambda g: (np.repeat(g[:, None], cols, axis=1),))


def softmax_rows(x: Tensor) -> Tensor:
    _require_2d("softmax_rows", x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, "softmax_rows", (x,), backward)


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    _require_2d("l2_normalize_rows", x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True)) + eps
    y = x.data / norm

    def backward(g):
        # d(x/n) with n = |x| + eps
        proj = (g * x.data).sum(axis=1, keepdims=True)
        raw = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
        safe = np.where(raw > 0, raw, 1.0)
        return (g / norm - x.data * proj / (norm * norm * safe),)

    return _make(y, "l2_normalize_rows", (x,), backward)


def row_inner(a: Tensor, b: Tensor) -> Tensor:
    """All pairwise inner products between rows: out[i, j] = a[i] . b[j]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("row_inner", a.shape, b.shape)

    def backward(g):
        return g @ b.data, g.T @ a.data

    return _make(a.data @ b.data.T, "row_inner", (a, b), backward)


def grad_reverse(x: Tensor, coefficient: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the incoming gradient by ``-coefficient``."""
    if coefficient < 0:
        raise ValueError("grad_reverse coefficient must be >= 0")
    c = float(coefficient)
    return _make(x.data.copy(), "grad_reverse", (x,), lambda g: (-c * g,))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)
