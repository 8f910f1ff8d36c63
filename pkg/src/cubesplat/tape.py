"""Array-valued reverse-mode automatic differentiation.

A :class:`Tape` records every primitive operation in creation order, which is
already a topological order, so the backward pass is a single reverse sweep.
Values are float64 numpy arrays throughout. Gradients of a scalar root are
accumulated into ``Node.grad``; nodes the root does not depend on read as
zero.

Constants never enter the tape: any plain array or float operand is treated
as non-differentiable. Parameters are wrapped once per tape via
:meth:`Tape.param`, keyed by array identity, so a parameter used by several
operations accumulates a single gradient.
"""

import numpy as np

from .errors import InvalidInputError


def _lift(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient g down to a broadcast operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Node:
    """One recorded value; supports numpy-style arithmetic."""

    __slots__ = ("tape", "value", "tid", "parents", "vjp", "_grad")
    __array_ufunc__ = None  # keep numpy from consuming Nodes elementwise

    def __init__(self, tape, value, parents=(), vjp=None):
        self.tape = tape
        self.value = _lift(value)
        self.parents = parents
        self.vjp = vjp
        self._grad = None
        tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def __repr__(self):
        return f"Node(id={self.tid}, shape={self.value.shape})"

    # arithmetic ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return self.tape.node(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, k):
        if isinstance(k, Node):
            raise InvalidInputError("only constant exponents are supported")
        v = self.value
        out = v ** k
        return self.tape.node(out, (self,), lambda g: (g * k * v ** (k - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        v = self.value

        def vjp(g):
            out = np.zeros_like(v)
            np.add.at(out, key, g)
            return (out,)

        return self.tape.node(v[key], (self,), vjp)


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self._param_cache = {}

    def _record(self, node):
        node.tid = len(self.nodes)
        self.nodes.append(node)

    def node(self, value, parents=(), vjp=None):
        return Node(self, value, parents, vjp)

    def leaf(self, value):
        """Record a differentiable input."""
        return Node(self, value)

    def param(self, array):
        """Leaf node for a parameter array, cached by array identity."""
        key = id(array)
        node = self._param_cache.get(key)
        if node is None:
            node = self.leaf(array)
            self._param_cache[key] = node
        return node

    def grad_of(self, array):
        """Gradient accumulated for a parameter wrapped via :meth:`param`."""
        node = self._param_cache.get(id(array))
        if node is None:
            return np.zeros_like(np.asarray(array, dtype=np.float64))
        return node.grad

    def backward(self, root):
        """Reverse-accumulate d(root)/d(node) for every recorded node."""
        if not isinstance(root, Node) or root.tape is not self:
            raise InvalidInputError("backward root must be a node on this tape")
        if root.value.size != 1:
            raise InvalidInputError("backward root must be scalar")
        seed = np.ones_like(root.value)
        root._grad = seed if root._grad is None else root._grad + seed
        for node in reversed(self.nodes[: root.tid + 1]):
            if node._grad is None or node.vjp is None:
                continue
            grads = node.vjp(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is None:
                    continue
                if parent._grad is None:
                    parent._grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent._grad = parent._grad + g


def _binary(a, b, fwd, vjp_a, vjp_b):
    if isinstance(a, Node):
        tape = a.tape
    elif isinstance(b, Node):
        tape = b.tape
    else:
        raise InvalidInputError("at least one operand must be a Node")
    av = a.value if isinstance(a, Node) else _lift(a)
    bv = b.value if isinstance(b, Node) else _lift(b)
    out = fwd(av, bv)
    parents = []
    backs = []
    if isinstance(a, Node):
        parents.append(a)
        backs.append(lambda g: _unbroadcast(vjp_a(g, av, bv), av.shape))
    if isinstance(b, Node):
        parents.append(b)
        backs.append(lambda g: _unbroadcast(vjp_b(g, av, bv), bv.shape))

    def vjp(g):
        return tuple(back(g) for back in backs)

    return tape.node(out, tuple(parents), vjp)


def add(a, b):
    return _binary(a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def div(a, b):
    return _binary(a, b, np.divide,
                   lambda g, av, bv: g / bv,
                   lambda g, av, bv: -g * av / (bv * bv))


def matmul(a, b):
    """2-D matrix product routed through the kernel backend."""
    from . import kernels

    def fwd(av, bv):
        return kernels.matmul(av, bv)

    def vjp_a(g, av, bv):
        return kernels.matmul(np.ascontiguousarray(g), np.ascontiguousarray(bv.T))

    def vjp_b(g, av, bv):
        return kernels.matmul(np.ascontiguousarray(av.T), np.ascontiguousarray(g))

    return _binary(a, b, fwd, vjp_a, vjp_b)


def _unary(x, out, back):
    return x.tape.node(out, (x,), lambda g: (back(g),))


def exp(x):
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out)


def log(x):
    return _unary(x, np.log(x.value), lambda g: g / x.value)


def sqrt(x):
    out = np.sqrt(x.value)
    return _unary(x, out, lambda g: g * 0.5 / out)


def tanh(x):
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    out = _sigmoid(x.value)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def softplus(x):
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _unary(x, out, lambda g: g * _sigmoid(v))


def relu(x):
    v = x.value
    return _unary(x, np.maximum(v, 0.0), lambda g: g * (v > 0))


def absolute(x):
    v = x.value
    return _unary(x, np.abs(v), lambda g: g * np.sign(v))


def nsum(x, axis=None, keepdims=False):
    v = x.value
    out = v.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, v.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, v.shape).copy()

    return _unary(x, out, back)


def nmean(x, axis=None, keepdims=False):
    v = x.value
    count = v.size if axis is None else v.shape[axis]
    return nsum(x, axis=axis, keepdims=keepdims) / float(count)


def reshape(x, shape):
    v = x.value
    return _unary(x, v.reshape(shape), lambda g: g.reshape(v.shape))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _unary(x, x.value.transpose(axes), lambda g: g.transpose(inv))


def take(x, idx, axis=0):
    """Gather rows by integer index; duplicates accumulate in the backward."""
    if axis != 0:
        raise InvalidInputError("take supports axis 0 only")
    idx = np.asarray(idx, dtype=np.int64)
    v = x.value

    def back(g):
        out = np.zeros_like(v)
        np.add.at(out, idx, g)
        return out

    return _unary(x, v[idx], back)


def concat(parts, axis=0):
    parts = list(parts)
    tape = next(p.tape for p in parts if isinstance(p, Node))
    vals = [p.value if isinstance(p, Node) else _lift(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    bounds = np.cumsum([0] + sizes)
    parents = []
    segments = []
    for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        if isinstance(p, Node):
            parents.append(p)
            segments.append((int(lo), int(hi)))

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(moved[lo:hi], 0, axis) for lo, hi in segments)

    return tape.node(out, tuple(parents), vjp)


def stack(parts, axis=0):
    parts = list(parts)
    tape = next(p.tape for p in parts if isinstance(p, Node))
    vals = [p.value if isinstance(p, Node) else _lift(p) for p in parts]
    out = np.stack(vals, axis=axis)
    parents = []
    slots = []
    for k, p in enumerate(parts):
        if isinstance(p, Node):
            parents.append(p)
            slots.append(k)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[k] for k in slots)

    return tape.node(out, tuple(parents), vjp)
