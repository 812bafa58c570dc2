"""A small reverse-mode differentiation tape over numpy arrays.

Nodes are recorded eagerly: every operation computes its value on the
spot and appends a backward rule to the tape.  Only nodes that depend on
a parameter leaf are differentiated, so constant subgraphs (ray sample
positions, positional encodings) cost nothing in the backward pass.

    tape = Tape()
    w = tape.param(np.array([3.0]))
    y = (w * w).sum()
    backward(tape, y)   # -> array([6.])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(RuntimeError):
    pass


class NonScalarOutput(AutodiffError):
    pass


class GraphCycle(AutodiffError):
    pass


class _Node:
    __slots__ = ("value", "parents", "vjp", "requires_grad")

    def __init__(self, value, parents, vjp, requires_grad):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad


class Tape:
    """Append-only record of a forward computation."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: list[int] = []
        self.adjoints: list | None = None

    def _push(self, value, parents: Sequence["Var"] = (), vjp: Callable | None = None) -> "Var":
        nodes = self.nodes
        idx = len(nodes)
        pidx = []
        req = False
        for p in parents:
            i = p.index
            if i >= idx:
                raise GraphCycle("node refers to a parent recorded after it")
            req = req or nodes[i].requires_grad
            pidx.append(i)
        nodes.append(_Node(value, pidx, vjp if req else None, req))
        return Var(self, idx)

    def const(self, value) -> "Var":
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, value) -> "Var":
        v = self._push(np.asarray(value, dtype=np.float64))
        self.nodes[v.index].requires_grad = True
        self.params.append(v.index)
        return v


def _lift(tape: Tape, x) -> "Var":
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    __slots__ = ("tape", "index")
    __array_ufunc__ = None     # make ndarray <op> Var defer to the reflected Var method

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


# --------------------------------------------------------------------------- #
# primitives                                                                   #
# --------------------------------------------------------------------------- #


def add(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._push(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return a.tape._push(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._push(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape._push(
        out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    )


def affine(x: Var, W: Var, b: Var | None = None) -> Var:
    """``x @ W + b`` for x of shape (n, i), W (i, o), b (o,)."""
    xv, Wv = x.value, W.value
    need_x = x.tape.nodes[x.index].requires_grad
    out = xv @ Wv
    if b is None:
        return x.tape._push(out, (x, W), lambda g: (g @ Wv.T if need_x else None, xv.T @ g))
    out += b.value
    return x.tape._push(out, (x, W, b), lambda g: (g @ Wv.T if need_x else None, xv.T @ g, g.sum(axis=0)))


def relu(x: Var) -> Var:
    out = np.maximum(x.value, 0.0)
    return x.tape._push(out, (x,), lambda g: (g * (out > 0),))


def softplus(x: Var) -> Var:
    xv = x.value
    out = np.logaddexp(0.0, xv)
    return x.tape._push(out, (x,), lambda g: (g * _sigmoid(xv),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return x.tape._push(out, (x,), lambda g: (g * out,))


def sin(x: Var) -> Var:
    xv = x.value
    return x.tape._push(np.sin(xv), (x,), lambda g: (g * np.cos(xv),))


def cos(x: Var) -> Var:
    xv = x.value
    return x.tape._push(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),))


def sqrt(x: Var) -> Var:
    out = np.sqrt(x.value)
    # zero subgradient at the origin instead of inf * 0
    inv = np.divide(0.5, out, out=np.zeros_like(out), where=out > 0)
    return x.tape._push(out, (x,), lambda g: (g * inv,))


def vabs(x: Var) -> Var:
    sgn = np.sign(x.value)
    return x.tape._push(np.abs(x.value), (x,), lambda g: (g * sgn,))


def vsum(x: Var, axis=None) -> Var:
    shape = x.shape
    out = x.value.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._push(np.asarray(out), (x,), vjp)


def cumsum_exclusive(x: Var, axis: int = -1) -> Var:
    """Running sum along ``axis`` excluding the current element."""
    v = x.value
    out = np.cumsum(v, axis=axis) - v

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g,)

    return x.tape._push(out, (x,), vjp)


def dot(a: Var, b: Var) -> Var:
    """Inner product over the last axis."""
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = np.einsum("...k,...k->...", av, bv)
    return tape._push(
        out,
        (a, b),
        lambda g: (_unbroadcast(g[..., None] * bv, av.shape), _unbroadcast(g[..., None] * av, bv.shape)),
    )


def normalize(v: Var) -> Var:
    """``v / |v|`` over the last axis."""
    vv = v.value
    norm = np.linalg.norm(vv, axis=-1, keepdims=True)
    u = vv / norm

    def vjp(g):
        return ((g - u * np.sum(g * u, axis=-1, keepdims=True)) / norm,)

    return v.tape._push(u, (v,), vjp)


def smooth_l1(x: Var, delta: float) -> Var:
    """Huber-style penalty: ``x^2 / (2 delta)`` below ``delta``, ``|x| - delta/2`` above."""
    xv = x.value
    ax = np.abs(xv)
    quad = ax < delta
    out = np.where(quad, 0.5 * xv * xv / delta, ax - 0.5 * delta)
    return x.tape._push(out, (x,), lambda g: (g * np.where(quad, xv / delta, np.sign(xv)),))


def getitem(x: Var, key) -> Var:
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return x.tape._push(np.asarray(x.value[key]), (x,), vjp)


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape._push(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = xs[0].tape
    xs = [_lift(tape, x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tape._push(
        np.concatenate([x.value for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(xs: Sequence[Var], axis: int = -1) -> Var:
    tape = xs[0].tape
    xs = [_lift(tape, x) for x in xs]
    return tape._push(
        np.stack([x.value for x in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


# --------------------------------------------------------------------------- #
# reverse sweep                                                                #
# --------------------------------------------------------------------------- #


def backward(tape: Tape, output: Var) -> np.ndarray:
    """Gradient of a scalar ``output`` w.r.t. all parameter leaves.

    Parameter gradients are flattened and concatenated in registration
    order.  Intermediate adjoints are discarded afterwards.
    """
    if output.tape is not tape:
        raise AutodiffError("output belongs to a different tape")
    if output.value.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    nodes = tape.nodes
    adj: list = [None] * len(nodes)
    adj[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        grads = node.vjp(g)
        for p, gp in zip(node.parents, grads):
            if p >= i:
                raise GraphCycle("parent index not before child")
            if gp is None or not nodes[p].requires_grad:
                continue
            adj[p] = gp if adj[p] is None else adj[p] + gp
    tape.adjoints = None
    out = []
    for p in tape.params:
        g = adj[p]
        out.append(np.zeros(nodes[p].value.size) if g is None else np.asarray(g, dtype=np.float64).ravel())
    return np.concatenate(out) if out else np.zeros(0)
