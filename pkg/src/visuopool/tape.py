"""Define-by-run reverse-mode autodiff over dense float64 arrays.

Every value is a :class:`Node` recorded on a :class:`Tape`. Arrays are at least
2-D; leading axes act as batch axes for ``matmul`` and the elementwise ops so a
minibatch of token grids can go through one graph. Broadcasting is limited to
numpy's rules, and gradients are summed back onto the broadcast input shape.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of the operation."""


class ContractError(ValueError):
    """A precondition on how an operation is called was violated."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("tape", "id", "kind", "inputs", "value", "grad", "_backward", "needs_grad")

    def __init__(self, tape: "Tape", kind: str, inputs: Sequence["Node"], value: np.ndarray,
                 backward: Callable[[np.ndarray], Sequence[np.ndarray]] | None = None):
        self.tape = tape
        self.kind = kind
        self.inputs = tuple(inputs)
        self.value = value
        self.grad: np.ndarray | None = None
        self._backward = backward
        self.needs_grad = kind == "leaf" or any(x.needs_grad for x in self.inputs)
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, kind={self.kind!r}, shape={self.shape})"

    # operator sugar; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_lift(self.tape, other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of a forward computation.

    Node ids are creation indices, so inputs always precede outputs and the
    backward sweep is a plain reverse loop.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, kind: str = "leaf") -> Node:
        return Node(self, kind, (), _as_array(value))

    def constant(self, value) -> Node:
        return self.leaf(value, kind="const")

    def backward(self, loss: Node) -> None:
        backward(self, loss)

    def clear(self) -> None:
        """Drop every recorded node.

        Nodes point back at their tape, so a finished graph is a reference
        cycle that only the cyclic collector frees. Clearing breaks the cycle
        and releases the intermediate arrays as soon as the caller lets go.
        """
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        return self

    def __exit__(self, *exc) -> None:
        self.clear()


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _check_finite(value: np.ndarray, kind: str) -> np.ndarray:
    # a NaN or inf anywhere makes the sum non-finite; the full scan only runs on suspicion
    if not math.isfinite(value.sum()) and not np.all(np.isfinite(value)):
        raise DomainError(f"{kind} produced non-finite values")
    return value


def _record(a: Node, kind: str, inputs, value, backward_fn) -> Node:
    return Node(a.tape, kind, inputs, _check_finite(value, kind), backward_fn)


def matmul(a: Node, b: Node) -> Node:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    if bv.ndim == 2 and av.ndim > 2:
        # stacked @ shared matrix: fold batch axes into rows so both passes are single GEMMs
        k, m = bv.shape
        a2 = av.reshape(-1, k)
        out = (a2 @ bv).reshape(*av.shape[:-1], m)

        def bwd(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ bv.T).reshape(av.shape) if a.needs_grad else None
            return ga, (a2.T @ g2 if b.needs_grad else None)

        return _record(a, "matmul", (a, b), out, bwd)

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.needs_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.needs_grad else None
        return ga, gb

    return _record(a, "matmul", (a, b), av @ bv, bwd)


def add(a: Node, b) -> Node:
    b = _lift(a.tape, b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a, "add", (a, b), out, bwd)


def mul(a: Node, b) -> Node:
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _record(a, "mul", (a, b), out, bwd)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _record(a, "scale", (a,), a.value * c, lambda g: (g * c,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _record(a, "relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _record(a, "tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _record(a, "exp", (a,), out, lambda g: (g * out,))


def ln(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise DomainError("ln requires strictly positive inputs")
    av = a.value
    return _record(a, "ln", (a,), np.log(av), lambda g: (g / av,))


def softmax_rows(a: Node) -> Node:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(a, "softmax", (a,), out, bwd)


def concat_cols(a: Node, b: Node) -> Node:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_cols row mismatch: {a.shape} ++ {b.shape}")
    k = a.shape[-1]

    def bwd(g):
        return g[..., :k], g[..., k:]

    return _record(a, "concat", (a, b), np.concatenate([a.value, b.value], axis=-1), bwd)


def reshape(a: Node, shape: Sequence[int]) -> Node:
    src = a.shape
    return _record(a, "reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.value.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a, "transpose", (a,), np.transpose(a.value, axes),
                   lambda g: (np.transpose(g, inverse),))


def sum_all(a: Node) -> Node:
    src = a.shape
    return _record(a, "sum", (a,), a.value.sum().reshape(1, 1),
                   lambda g: (np.broadcast_to(g.reshape(()), src).copy(),))


def sum_axis(a: Node, axis: int, keepdims: bool = False) -> Node:
    src = a.shape
    ax = axis % len(src)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src).copy(),)

    return _record(a, "sum_axis", (a,), a.value.sum(axis=ax, keepdims=keepdims), bwd)


def mean_axis(a: Node, axis: int, keepdims: bool = False) -> Node:
    return scale(sum_axis(a, axis, keepdims), 1.0 / a.shape[axis])


def backward(tape: Tape, loss: Node) -> None:
    """Populate ``.grad`` on every node reachable from ``loss``.

    All accumulators are reset first, so repeated calls give identical results.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss node belongs to a different tape")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        if node.grad is None or node._backward is None or not node.needs_grad:
            continue
        for parent, g in zip(node.inputs, node._backward(node.grad)):
            if not parent.needs_grad or g is None:
                continue
            # never accumulate in place: backward rules may hand out views of shared arrays
            parent.grad = g if parent.grad is None else parent.grad + g
    for node in tape.nodes:
        if node.grad is None and node.kind == "leaf":
            node.grad = np.zeros_like(node.value)
