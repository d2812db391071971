"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A :class:`GradTape` hands out tracked leaf tensors (``watch``) and records every
primitive operation whose inputs carry one of its graph nodes. Because records
are appended in execution order, walking them backwards visits each node in
reverse topological order exactly once; :meth:`GradTape.backward` does that walk
a single time and returns the gradient of every watched leaf.

Tensors built from plain arrays carry no node and never receive gradient, which
is also how values are detached (:func:`detach`).

Example::

    with GradTape() as tape:
        x = tape.watch(np.array(3.0), "x")
        loss = x * x
    grads = backward(loss)        # {"x": array(6.)}
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(frozen=True, eq=False)
class Node:
    """Graph handle of a tracked tensor: its tape and its slot on that tape."""

    tape: GradTape
    index: int


@dataclass(frozen=True)
class _Record:
    output: int
    inputs: tuple[int | None, ...]
    vjp: VJP


class Tensor:
    """Dense double-precision array, optionally attached to a :class:`GradTape`.

    Parameters
    ----------
    data : array-like
        Values, stored row-major as ``float64``.
    node : Node, optional
        Graph handle. ``None`` means the tensor is a constant.
    """

    __slots__ = ("data", "node")
    __array_priority__ = 100

    def __init__(self, data: Any, node: Node | None = None) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tracked = ", tracked" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return take(self, index)


class GradTape:
    """Ordered record of primitive operations for one backward pass.

    A tape belongs to a single worker. It can be differentiated once; a second
    :meth:`backward` call raises ``RuntimeError``.
    """

    def __init__(self) -> None:
        self._records: list[_Record] = []
        self._leaves: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._n_nodes = 0
        self._consumed = False

    def __enter__(self) -> GradTape:
        return self

    def __exit__(self, *exc: object) -> None:
        return None

    @property
    def consumed(self) -> bool:
        return self._consumed

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaves)

    def _check_open(self) -> None:
        if self._consumed:
            raise RuntimeError("GradTape already consumed by a backward pass")

    def _new_node(self) -> Node:
        node = Node(self, self._n_nodes)
        self._n_nodes += 1
        return node

    def watch(self, value: Any, name: str) -> Tensor:
        """Return a tracked leaf tensor holding *value* under *name*."""
        self._check_open()
        if name in self._leaves:
            raise ValueError(f"Parameter {name!r} is already watched on this tape")
        data = np.asarray(value, dtype=np.float64)
        node = self._new_node()
        self._leaves[name] = (node.index, tuple(data.shape))
        return Tensor(data, node)

    def watch_all(
        self, params: Mapping[str, np.ndarray], prefix: str = ""
    ) -> dict[str, Tensor]:
        """Watch every array of *params*, naming leaves ``prefix + key``."""
        return {key: self.watch(value, prefix + key) for key, value in params.items()}

    def record(
        self, data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP
    ) -> Tensor:
        self._check_open()
        node = self._new_node()
        self._records.append(
            _Record(
                output=node.index,
                inputs=tuple(
                    t.node.index if t.node is not None else None for t in inputs
                ),
                vjp=vjp,
            )
        )
        return Tensor(data, node)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Differentiate scalar *loss* w.r.t. every watched leaf.

        Leaves the loss does not depend on receive zero arrays.
        """
        if loss.node is None or loss.node.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._check_open()
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * self._n_nodes
        grads[loss.node.index] = np.ones_like(loss.data)
        for record in reversed(self._records):
            upstream = grads[record.output]
            if upstream is None:
                continue
            for index, grad in zip(record.inputs, record.vjp(upstream)):
                if index is None or grad is None:
                    continue
                current = grads[index]
                grads[index] = grad if current is None else current + grad
            grads[record.output] = None
        self._records.clear()

        result: dict[str, np.ndarray] = {}
        for name, (index, shape) in self._leaves.items():
            grad = grads[index]
            result[name] = (
                np.zeros(shape) if grad is None else np.array(grad).reshape(shape)
            )
        logger.debug("backward: %d leaves, %d nodes", len(result), self._n_nodes)
        return result


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Differentiate *loss* on the tape it was recorded on."""
    if loss.node is None:
        raise ValueError("loss does not depend on any tracked tensor")
    return loss.node.tape.backward(loss)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def detach(t: Tensor) -> Tensor:
    """Constant copy of *t*: same values, no graph node."""
    return Tensor(t.data)


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap a forward result computed outside this module as a graph operation.

    *vjp* maps the upstream gradient to one gradient (or ``None``) per input.
    If no input is tracked the result is a constant and *vjp* is never used.
    """
    tapes = {id(t.node.tape): t.node.tape for t in inputs if t.node is not None}
    if not tapes:
        return Tensor(data)
    if len(tapes) > 1:
        raise ValueError("operands were recorded on different tapes")
    tape = next(iter(tapes.values()))
    return tape.record(data, inputs, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting)
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Any, b: Any) -> Tensor:
    """Matrix product for operands of rank 1 or 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul needs rank 1-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return custom_op(ad @ bd, (a, b), vjp)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return custom_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return custom_op(
        a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(a.shape),)
    )


def take(a: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(a.shape)
        np.add.at(out, index, g)
        return (out,)

    return custom_op(np.array(a.data[index]), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    return custom_op(
        data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis))
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    return custom_op(
        data,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum(  # noqa: A001
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return custom_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)]
    )
    return sum(a, axis=axis, keepdims=keepdims) / float(count)


def masked_logsumexp(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """``log(sum(exp(a)))`` over entries where *mask* is true.

    Rows with no selected entry evaluate to 0 and pass no gradient.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    valid = m.any(axis=axis, keepdims=True)
    x = np.where(m, a.data, -np.inf)
    lse = special.logsumexp(np.where(valid, x, 0.0), axis=axis, keepdims=True)
    lse = np.where(valid, lse, 0.0)
    weights = np.exp(np.where(m, a.data - lse, -np.inf))

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        return (weights * np.expand_dims(g, axis),)

    return custom_op(np.squeeze(lse, axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return custom_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return custom_op(out, (a,), lambda g: (0.5 * g / out,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    return custom_op(
        np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),)
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = special.log_softmax(a.data, axis=axis)
    probs = np.exp(out)
    return custom_op(
        out, (a,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),)
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = special.softmax(a.data, axis=axis)
    return custom_op(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the Euclidean norm along *axis*; norms must exceed *eps*."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError(f"cannot normalize vectors with norm <= {eps}")
    out = a.data / norm
    return custom_op(
        out,
        (a,),
        lambda g: ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,),
    )
