"""Tape-based reverse-mode automatic differentiation.

A :class:`Tape` records every :class:`Node` produced while it is active. Each
node stores its value and, for every parent that needs a gradient, a
vector-Jacobian product closure. :meth:`Tape.backward` walks the tape in
reverse creation order, so gradient accumulation order is fixed and results are
deterministic.

A tape built with ``record=False`` runs the identical value computations but
keeps no graph; it is what evaluation uses, and it guarantees recorded and
unrecorded forward values agree bit for bit.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class TapeError(RuntimeError):
    pass


class GradCheckError(ArithmeticError):
    """Non-finite gradient encountered during a gradient check."""

    def __init__(self, name: str, index: tuple, analytic: float, numeric: float):
        self.name, self.index = name, index
        self.analytic, self.numeric = analytic, numeric
        super().__init__(f"non-finite gradient for {name}{list(index)}: "
                         f"analytic={analytic}, numeric={numeric}")


class Node:
    __slots__ = ("value", "tape", "parents", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", parents=(), requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.shape}, name={self.name!r})"

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.const(np.asarray(other, dtype=T.DTYPE))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __truediv__(self, other):
        return div(self, self._lift(other))


class Tape:
    """Ordered record of node creations. Single-threaded."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self._done = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Node:
        value = np.asarray(value, dtype=T.DTYPE)
        node = Node(value, self, (), requires_grad and self.record, name)
        if self.record:
            self.nodes.append(node)
        return node

    def const(self, value, name: str | None = None) -> Node:
        return self.leaf(value, name, requires_grad=False)

    def backward(self, loss: Node) -> None:
        """Populate ``.grad`` on every node that requires one; leaves keep theirs."""
        if loss.tape is not self:
            raise TapeError("loss belongs to a different tape")
        if not self.record:
            raise TapeError("tape was not recording")
        if self._done:
            raise TapeError("backward already ran on this tape; build a new one")
        if loss.value.size != 1:
            raise TapeError(f"loss must have exactly one element, got shape {loss.shape}")
        self._done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
            # interior gradients are not needed once propagated
            node.grad = None if node is not loss else g
            node.parents = ()


def apply(value: np.ndarray, inputs: Sequence[Node], vjps: Sequence[Callable | None]) -> Node:
    """Create the node ``value`` computed from ``inputs``.

    ``vjps[i]`` maps the output gradient to the gradient of ``inputs[i]``; it is
    only kept (and later called) when that input requires a gradient.
    """
    tape = inputs[0].tape
    for x in inputs[1:]:
        if x.tape is not tape:
            raise TapeError("cannot mix nodes from different tapes")
    if not tape.record:
        return Node(value, tape)
    parents = tuple((x, f) for x, f in zip(inputs, vjps) if x.requires_grad and f is not None)
    node = Node(value, tape, parents, bool(parents))
    tape.nodes.append(node)
    return node


# elementwise ---------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    return apply(T.ew("add", a.value, b.value), (a, b),
                 (lambda g: g, lambda g: T.unbroadcast(g, b.shape)))


def sub(a: Node, b: Node) -> Node:
    return apply(T.ew("sub", a.value, b.value), (a, b),
                 (lambda g: g, lambda g: -T.unbroadcast(g, b.shape)))


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    bb = T.broadcast_operand(bv, av.shape)
    return apply(T.ew("mul", av, bv), (a, b),
                 (lambda g: g * bb, lambda g: T.unbroadcast(g * av, bv.shape)))


def div(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    bb = T.broadcast_operand(bv, av.shape)
    out = T.ew("div", av, bv)
    return apply(out, (a, b),
                 (lambda g: g / bb, lambda g: T.unbroadcast(-g * out / bb, bv.shape)))


def maximum(a: Node, b: Node) -> Node:
    av = a.value
    bb = T.broadcast_operand(b.value, av.shape)
    pick_a = av >= bb
    return apply(T.ew("max", av, b.value), (a, b),
                 (lambda g: g * pick_a, lambda g: T.unbroadcast(g * ~pick_a, b.shape)))


def ew(op: str, a: Node, b: Node) -> Node:
    return {"add": add, "sub": sub, "mul": mul, "div": div, "max": maximum}[op](a, b)


def relu(x: Node) -> Node:
    mask = x.value > 0
    with np.errstate(invalid="ignore"):
        out = x.value * mask

    def vjp(g):
        with np.errstate(invalid="ignore"):
            return g * mask
    return apply(out, (x,), (vjp,))


def sigmoid(x: Node) -> Node:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.value))
    return apply(s, (x,), (lambda g: g * s * (1.0 - s),))


def sqrt(x: Node) -> Node:
    with np.errstate(invalid="ignore"):
        r = np.sqrt(x.value)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return g * 0.5 / r
    return apply(r, (x,), (vjp,))


def detach(x: Node) -> Node:
    """Same value, no gradient path."""
    return apply(x.value, (x,), (None,))


# linear algebra and layout ------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return apply(T.matmul(av, bv), (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def reduce(op: str, x: Node, axes=None) -> Node:
    ax = T._axes(x.value, axes)
    out = T.reduce(op, x.value, ax)
    kept = tuple(1 if i in ax else d for i, d in enumerate(x.shape))
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    xv = x.value
    if op == "sum":
        vjp = lambda g: np.broadcast_to(g.reshape(kept), xv.shape).copy()
    elif op == "mean":
        vjp = lambda g: np.broadcast_to(g.reshape(kept) / count, xv.shape).copy()
    else:
        def vjp(g):
            with np.errstate(over="ignore", invalid="ignore"):
                centered = xv - xv.mean(axis=ax, keepdims=True)
                return g.reshape(kept) * (2.0 / count) * centered
    return apply(out, (x,), (vjp,))


def reshape(x: Node, shape) -> Node:
    src = x.shape
    return apply(T.reshape(x.value, shape), (x,), (lambda g: g.reshape(src),))


def permute(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return apply(T.permute(x.value, axes), (x,), (lambda g: T.permute(g, inv),))


def slice_channels(x: Node, start: int, stop: int) -> Node:
    """``x[:, start:stop]`` for rank-2 or rank-4 inputs."""
    src = x.shape

    def vjp(g):
        full = np.zeros(src, dtype=T.DTYPE)
        full[:, start:stop] = g
        return full
    return apply(np.ascontiguousarray(x.value[:, start:stop]), (x,), (vjp,))


# gradient checking ----------------------------------------------------------

def _numeric_grad(f, arrays: dict[str, np.ndarray], name: str, h: float) -> np.ndarray:
    x = arrays[name]
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = _eval_scalar(f, arrays)
        x[idx] = orig - h
        fm = _eval_scalar(f, arrays)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def _eval_scalar(f, arrays) -> float:
    tape = Tape(record=False)
    nodes = {k: tape.leaf(v, k) for k, v in arrays.items()}
    return float(f(nodes).value.reshape(()))


def analytic_grads(f, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    tape = Tape()
    nodes = {k: tape.leaf(v.copy(), k) for k, v in arrays.items()}
    loss = f(nodes)
    tape.backward(loss)
    return {k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in nodes.items()}


def grad_check_all(f: Callable[[dict[str, Node]], Node], arrays: dict[str, np.ndarray],
                   h: float = 1e-5) -> dict[str, float]:
    """Max relative error per named input between autodiff and central differences.

    ``f`` receives a dict of nodes (same keys as ``arrays``) and returns a
    scalar node. The error for one element is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arrays = {k: np.array(v, dtype=T.DTYPE) for k, v in arrays.items()}
    analytic = analytic_grads(f, arrays)
    report = {}
    for name in arrays:
        a = analytic[name]
        n = _numeric_grad(f, arrays, name, h)
        bad = ~(np.isfinite(a) & np.isfinite(n))
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise GradCheckError(name, idx, float(a[idx]), float(n[idx]))
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        report[name] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return report


def grad_check(f: Callable[[Node], Node], x: np.ndarray, h: float = 1e-5) -> float:
    """Single-input form of :func:`grad_check_all`."""
    return grad_check_all(lambda nodes: f(nodes["x"]), {"x": x}, h)["x"]
