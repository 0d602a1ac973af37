"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are numpy arrays of rank at most 2 (scalars are 0-d arrays). Every
operation evaluates eagerly and records a local backward rule on an explicit
tape; ``backward`` replays the tape in reverse topological order exactly once.
Broadcasting is restricted to scalar-with-array to keep shape bugs loud.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    EmptyInputError,
    NonScalarOutputError,
    ShapeError,
)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-only fast path)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Node:
    """One tape entry: a value, its gradient slot, and a local backward rule.

    ``_rule`` maps the incoming output gradient to one contribution per
    parent; it is ``None`` for leaves and for nodes built under ``no_grad``.
    """

    __slots__ = ("value", "grad", "_parents", "_rule")

    # Keep numpy from broadcasting against us; reflected operators run instead.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), rule=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} > 2 not supported")
        self.value = arr
        self.grad = np.zeros_like(arr)
        if _GRAD_ENABLED:
            self._parents = tuple(parents)
            self._rule = rule
        else:
            self._parents = ()
            self._rule = None

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, leaf={self._rule is None})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Parameter:
    """A named leaf node owned by exactly one model."""

    name: str
    node: Node

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad


def constant(value) -> Node:
    """Wrap an array or number as a leaf node (no gradient will reach it)."""
    return Node(value)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _check_binary(a: Node, b: Node, op: str) -> None:
    if a.value.shape == b.value.shape:
        return
    if a.value.ndim == 0 or b.value.ndim == 0:
        return
    raise ShapeError(
        f"{op}: shapes {a.value.shape} and {b.value.shape} are neither equal "
        "nor scalar-with-array"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Only scalar-with-array broadcasting exists, so the sole reduction is
    # collapsing the full gradient onto a scalar operand.
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")
    out = Node(a.value + b.value, (a, b))
    out._rule = lambda g: (
        _unbroadcast(g, a.value.shape),
        _unbroadcast(g, b.value.shape),
    )
    return out


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")
    out = Node(a.value - b.value, (a, b))
    out._rule = lambda g: (
        _unbroadcast(g, a.value.shape),
        _unbroadcast(-g, b.value.shape),
    )
    return out


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")
    out = Node(a.value * b.value, (a, b))
    out._rule = lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    )
    return out


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "div")
    if np.any(b.value == 0.0):
        raise DomainError("div: division by zero")
    out = Node(a.value / b.value, (a, b))
    out._rule = lambda g: (
        _unbroadcast(g / b.value, a.value.shape),
        _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
    )
    return out


def neg(a) -> Node:
    a = _wrap(a)
    out = Node(-a.value, (a,))
    out._rule = lambda g: (-g,)
    return out


def exp(a) -> Node:
    a = _wrap(a)
    out = Node(np.exp(a.value), (a,))
    out._rule = lambda g: (g * out.value,)
    return out


def log(a) -> Node:
    a = _wrap(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: input must be strictly positive")
    out = Node(np.log(a.value), (a,))
    out._rule = lambda g: (g / a.value,)
    return out


def tanh(a) -> Node:
    a = _wrap(a)
    out = Node(np.tanh(a.value), (a,))
    out._rule = lambda g: (g * (1.0 - out.value * out.value),)
    return out


def sigmoid(a) -> Node:
    a = _wrap(a)
    # exp(-|x|) never overflows; the two branches are the stable forms.
    z = np.exp(-np.abs(a.value))
    out = Node(np.where(a.value >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z)), (a,))
    out._rule = lambda g: (g * out.value * (1.0 - out.value),)
    return out


def square(a) -> Node:
    a = _wrap(a)
    out = Node(a.value * a.value, (a,))
    out._rule = lambda g: (g * 2.0 * a.value,)
    return out


def absolute(a) -> Node:
    a = _wrap(a)
    out = Node(np.abs(a.value), (a,))
    out._rule = lambda g: (g * np.sign(a.value),)
    return out


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul: both operands must be rank 2")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions {a.value.shape} x {b.value.shape} disagree"
        )
    out = Node(a.value @ b.value, (a, b))
    out._rule = lambda g: (g @ b.value.T, a.value.T @ g)
    return out


def sum_(a) -> Node:
    a = _wrap(a)
    if a.value.size == 0:
        raise EmptyInputError("sum of empty input")
    out = Node(a.value.sum(), (a,))
    out._rule = lambda g: (np.full(a.value.shape, g),)
    return out


def mean(a) -> Node:
    a = _wrap(a)
    if a.value.size == 0:
        raise EmptyInputError("mean of empty input")
    n = a.value.size
    out = Node(a.value.mean(), (a,))
    out._rule = lambda g: (np.full(a.value.shape, g / n),)
    return out


_UNARY = {
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "neg": neg,
    "square": square,
    "abs": absolute,
}

_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}

_REDUCE = {"sum": sum_, "mean": mean}


def elementwise(op: str, a, b=None) -> Node:
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise ShapeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ShapeError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(op: str, a) -> Node:
    """Dispatch a reduction (``sum`` or ``mean``) by name."""
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](a)


def _topo_order(root: Node) -> list[Node]:
    """Iterative post-order: parents appear before their consumers."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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
            stack.append((parent, False))
    return order


def backward(output: Node) -> None:
    """Accumulate d(output)/d(node) into ``grad`` for every reachable node.

    The traversal keeps its own accumulator so a repeated call adds the same
    contributions again (accumulation semantics); it never re-reads stale
    ``grad`` slots.
    """
    if output.value.ndim != 0:
        raise NonScalarOutputError(
            f"backward requires a scalar output, got shape {output.value.shape}"
        )
    order = _topo_order(output)
    flowing: dict[int, np.ndarray] = {id(output): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = flowing.get(id(node))
        if g is None:
            continue
        node.grad = node.grad + g
        if node._rule is None:
            continue
        for parent, contribution in zip(node._parents, node._rule(g)):
            prior = flowing.get(id(parent))
            flowing[id(parent)] = (
                contribution if prior is None else prior + contribution
            )


def zero_grad(params: list[Parameter]) -> None:
    """Reset the gradient slot of every parameter to zeros."""
    for p in params:
        p.node.grad = np.zeros_like(p.node.value)
