"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` leaves in
execution order, so the record is topologically sorted by construction.
:func:`backward` walks it once in reverse and accumulates vector-Jacobian
products in that fixed order, which makes gradients bit-reproducible.

Every primitive is exposed as a module-level function that also accepts plain
arrays. When none of the inputs is a :class:`Var` the numpy result is returned
directly and nothing is recorded, so model code written against these
functions runs untraced at full numpy speed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "index")
    __array_priority__ = 1000.0  # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, op={self.tape.nodes[self.index].op}, shape={self.shape})"

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

    def __pow__(self, exponent):
        if exponent != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def __getitem__(self, key):
        return take(self, key)


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple  # int -> node index, anything else -> constant array
    kwargs: dict


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> Var:
        """Register a differentiable input."""
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node("leaf", (), {}))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)

    def leaves(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]

    def _record(self, op, inputs, kwargs, value) -> Var:
        refs = tuple(x.index if isinstance(x, Var) else np.asarray(x, dtype=np.float64) for x in inputs)
        self.nodes.append(Node(op, refs, kwargs))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x):
    # branch form: exp never sees a positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _matvec_vjp(g, out, w, x):
    gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return gw, g @ w


def _take_vjp(g, out, x, key):
    z = np.zeros_like(x)
    if _has_array_index(key):
        np.add.at(z, key, g)
    else:
        z[key] = g
    return (z,)


def _has_array_index(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def _concat_vjp(g, out, *xs, axis):
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _sum_vjp(g, out, x, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


# name -> (forward, vjp); vjp(g, out, *inputs, **kwargs) returns one gradient per input
OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (np.add, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))),
    "sub": (np.subtract, lambda g, o, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))),
    "mul": (np.multiply, lambda g, o, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))),
    "div": (
        np.divide,
        lambda g, o, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
    ),
    "neg": (np.negative, lambda g, o, a: (-g,)),
    "square": (np.square, lambda g, o, a: (2.0 * a * g,)),
    "sigmoid": (_sigmoid, lambda g, o, a: (g * o * (1.0 - o),)),
    "tanh": (np.tanh, lambda g, o, a: (g * (1.0 - o * o),)),
    "matvec": (lambda w, x: x @ w.T, _matvec_vjp),
    "dot": (
        lambda a, b: np.sum(a * b, axis=-1),
        lambda g, o, a, b: (
            _unbroadcast(g[..., None] * b, a.shape),
            _unbroadcast(g[..., None] * a, b.shape),
        ),
    ),
    "sum": (lambda x, axis: np.sum(x, axis=axis), _sum_vjp),
    "concat": (lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp),
    "take": (lambda x, key: x[key], _take_vjp),
    "reshape": (lambda x, shape: np.reshape(x, shape), lambda g, o, x, shape: (np.reshape(g, x.shape),)),
}


def register(name: str, forward: Callable, vjp: Callable) -> None:
    """Add a primitive; ``vjp(g, out, *inputs, **kwargs)`` returns one gradient per input."""
    if name in OPS or name == "leaf":
        raise ValueError(f"primitive {name!r} already defined")
    OPS[name] = (forward, vjp)


def apply(op: str, inputs: Sequence, **kwargs):
    """Evaluate a registered primitive, recording it when any input is traced."""
    return _apply(op, inputs, **kwargs)


def _apply(op: str, inputs: Sequence, **kwargs):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    vals = [x.value if isinstance(x, Var) else _as_float(x) for x in inputs]
    out = OPS[op][0](*vals, **kwargs)
    if tape is None:
        return out
    return tape._record(op, inputs, kwargs, np.asarray(out))


def _as_float(x):
    # keeps extended precision (used by finite-difference oracles), promotes the rest
    a = np.asarray(x)
    return a if a.dtype == np.longdouble else a.astype(np.float64, copy=False)


def value_of(x) -> np.ndarray:
    """Concrete array behind ``x`` whether or not it is traced."""
    return x.value if isinstance(x, Var) else np.asarray(x)


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def neg(a):
    return _apply("neg", (a,))


def square(a):
    return _apply("square", (a,))


def sigmoid(a):
    return _apply("sigmoid", (a,))


def tanh(a):
    return _apply("tanh", (a,))


def identity(a):
    return a


def matvec(w, x):
    """Apply ``w`` (out x in) to the last axis of ``x``."""
    return _apply("matvec", (w, x))


def dot(a, b):
    """Inner product over the last axis."""
    return _apply("dot", (a, b))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return _apply("sum", (x,), axis=axis)


def mean(x, axis=None):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def concat(xs: Sequence, axis: int = -1):
    return _apply("concat", tuple(xs), axis=axis)


def take(x, key):
    return _apply("take", (x,), key=key)


def reshape(x, shape):
    return _apply("reshape", (x,), shape=tuple(shape))


def backward(loss: Var, wrt: Sequence[Var] | None = None) -> list[np.ndarray]:
    """Gradients of a scalar node with respect to leaves.

    Args:
        loss: scalar-valued node.
        wrt: leaves to report; defaults to every leaf on the tape in
            registration order.

    Returns:
        One gradient array per requested leaf, shaped like the leaf.
        Leaves the loss does not depend on get zeros.
    """
    if not isinstance(loss, Var):
        raise TypeError("loss must be a traced Var")
    if loss.value.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    adj: list = [None] * (loss.index + 1)
    adj[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        node = tape.nodes[i]
        if g is None or node.op == "leaf":
            continue
        vals = [tape.values[r] if isinstance(r, int) else r for r in node.inputs]
        grads = OPS[node.op][1](g, tape.values[i], *vals, **node.kwargs)
        for ref, gr in zip(node.inputs, grads):
            if isinstance(ref, int):
                adj[ref] = gr if adj[ref] is None else adj[ref] + gr
    if wrt is None:
        wrt = [Var(tape, i) for i in tape.leaves()]
    out = []
    for v in wrt:
        g = adj[v.index] if v.index < len(adj) else None
        out.append(np.zeros_like(v.value) if g is None else np.asarray(g, dtype=np.float64).reshape(v.shape))
    return out


def replay(tape: Tape, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
    """Re-execute the recorded program, optionally with new leaf values."""
    leaf_values = leaf_values or {}
    values: list[np.ndarray] = []
    for i, node in enumerate(tape.nodes):
        if node.op == "leaf":
            values.append(np.array(leaf_values.get(i, tape.values[i]), dtype=np.float64))
            continue
        args = [values[r] if isinstance(r, int) else r for r in node.inputs]
        values.append(np.asarray(OPS[node.op][0](*args, **node.kwargs)))
    return values


def gradient(f: Callable, theta: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of ``f`` at a flat vector ``theta``."""
    tape = Tape()
    x = tape.leaf(np.asarray(theta, dtype=np.float64))
    y = f(x)
    if not isinstance(y, Var):
        return float(y), np.zeros_like(x.value)
    (g,) = backward(y, [x])
    return float(y.value), g


def finite_difference(f: Callable, theta, h: float = 1e-6, dtype=np.float64) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time.

    With ``dtype=np.longdouble`` the function is evaluated in extended
    precision, which shrinks the cancellation error of the difference
    quotient when gradient entries are tiny.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta, dtype=dtype)
    g = np.zeros(theta.shape, dtype=np.float64)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step.flat[i] = h
        hi = np.asarray(value_of(f(theta + step)), dtype=dtype)
        lo = np.asarray(value_of(f(theta - step)), dtype=dtype)
        g.flat[i] = float((hi - lo) / (2 * step.flat[i]))
    return g


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    ad: np.ndarray
    fd: np.ndarray
    tolerance: float

    def worst(self) -> int:
        return int(np.argmax(self.rel_errors))


def grad_check(
    f: Callable,
    theta,
    tolerance: float = 1e-5,
    h: float = 1e-6,
    eps: float = 1e-8,
    ad_grad: np.ndarray | None = None,
    fd_dtype=np.float64,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` with central differences.

    ``f`` must be written with this module's primitives so that it runs both
    on plain arrays and on traced values. Passing ``ad_grad`` bypasses the
    tape, which is how a corrupted gradient is checked.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    ad = gradient(f, theta)[1] if ad_grad is None else np.asarray(ad_grad, dtype=np.float64)
    fd = finite_difference(f, theta, h, dtype=fd_dtype)
    rel = np.abs(ad - fd) / (np.abs(ad) + np.abs(fd) + eps)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst < tolerance, worst, rel, ad, fd, tolerance)
