"""Small dense-array reverse-mode automatic differentiation.

Every differentiable quantity in the package (network activations, log
densities, bounds) is a :class:`Node`. A node holds a float64 ``value`` and,
when it depends on a parameter, a closure that maps the gradient of the
output back onto its parents. Calling :func:`backward` on a scalar node
accumulates ``d root / d parameter`` into the ``grad`` field of every
parameter reachable from it.

Broadcasting follows numpy's right-aligned rule (equal extents or singleton
axes). Any forward result that is not finite raises :class:`NonFiniteError`
naming the op that produced it.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy import special

__all__ = [
    "Node", "ShapeError", "NonFiniteError", "BackwardError",
    "parameter", "constant", "no_grad", "as_node", "backward", "stop_gradient",
    "matmul", "add", "sub", "mul", "div", "neg", "tanh", "softplus", "sigmoid",
    "exp", "log", "log1p", "square", "sqrt", "lgamma", "sum", "mean",
    "broadcast_to", "concat", "logsumexp", "reshape", "take", "numerical_grad",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op, detail="", row=None, term=None):
        self.op = op
        self.row = row
        self.term = term
        msg = f"non-finite value produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class BackwardError(RuntimeError):
    """Misuse of :func:`backward`."""


class Node:
    """A dense float64 array taking part in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad",
                 "op", "is_leaf")

    __array_priority__ = 1000  # make ``ndarray + Node`` dispatch to Node

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False,
                 op="const"):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.is_leaf = not parents

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        kind = "param" if (self.is_leaf and self.requires_grad) else self.op
        return f"Node({kind}, shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


def parameter(value):
    """Create a trainable leaf node (a copy of ``value`` as float64)."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, op="param")


def constant(value):
    return Node(np.asarray(value, dtype=np.float64))


def as_node(x):
    return x if isinstance(x, Node) else constant(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check(value, op):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    return value


def _make(value, parents, backward_fn, op):
    _check(value, op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, True, op)
    return Node(value, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"op '{op}': cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
    return _make(a.value * b.value, (a, b), bw, "mul")


def div(a, b):
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def bw(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    return _make(out, (a, b), bw, "div")


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.value.T if a.requires_grad else None
        gb = a.value.T @ g if b.requires_grad else None
        return ga, gb
    return _make(a.value @ b.value, (a, b), bw, "matmul")


# -- elementwise unary -------------------------------------------------------

def neg(a):
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)

    def bw(g):
        d = out * out
        np.subtract(1.0, d, out=d)
        return (np.multiply(g, d, out=d),)
    return _make(out, (a,), bw, "tanh")


def softplus(a):
    a = as_node(a)
    return _make(np.logaddexp(0.0, a.value), (a,),
                 lambda g: (g * special.expit(a.value),), "softplus")


def sigmoid(a):
    a = as_node(a)
    out = special.expit(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a):
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, (a,), lambda g: (g / a.value,), "log")


def log1p(a):
    a = as_node(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log1p(a.value)
    return _make(out, (a,), lambda g: (g / (1.0 + a.value),), "log1p")


def square(a):
    a = as_node(a)
    return _make(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,), "square")


def sqrt(a):
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def lgamma(a):
    a = as_node(a)
    return _make(special.gammaln(a.value), (a,),
                 lambda g: (g * special.digamma(a.value),), "lgamma")


def stop_gradient(a):
    """Pass the value through; backward treats the result as a constant."""
    a = as_node(a)
    return Node(a.value, op="stop_gradient")


# -- reductions and shape ops ------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(a, axis=None, keepdims=False):
    a = as_node(a)
    ax = _norm_axis(axis, a.ndim)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)
    return _make(np.sum(a.value, axis=ax, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape):
    a = as_node(a)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"op 'broadcast_to': {a.shape} -> {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(nodes, axis=-1):
    """Concatenate along the last axis."""
    nodes = [as_node(n) for n in nodes]
    ndim = nodes[0].ndim
    if _norm_axis(axis, ndim) != ndim - 1:
        raise ShapeError("op 'concat' only supports the last axis")
    sizes = [n.shape[-1] for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=-1)
    except ValueError as exc:
        raise ShapeError(f"op 'concat': {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=-1))
    return _make(out, tuple(nodes), bw, "concat")


def logsumexp(a, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp over ``axis``."""
    a = as_node(a)
    ax = _norm_axis(axis, a.ndim)
    m = np.max(a.value, axis=ax, keepdims=True)
    shifted = np.exp(a.value - m)
    total = np.sum(shifted, axis=ax, keepdims=True)
    out_keep = m + np.log(total)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * (shifted / total),)
    return _make(out, (a,), bw, "logsumexp")


def reshape(a, shape):
    a = as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"op 'reshape': {a.shape} -> {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index):
    """Basic (slice) indexing, e.g. ``x[..., 2:4]``."""
    a = as_node(a)
    out = a.value[index]

    def bw(g):
        full = np.zeros(a.shape)
        full[index] += g
        return (full,)
    return _make(out, (a,), bw, "take")


# -- backward sweep ----------------------------------------------------------

def _topo_order(root):
    order, state = [], {}
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if key in state:
            # nodes only reference earlier nodes, so a node on the stack can't recur
            assert state[key] == 2, "cycle in computation graph"
            continue
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in state:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate ``d root / d p`` into ``p.grad`` for every reachable parameter.

    Raises :class:`BackwardError` if ``root`` is not a scalar or if a reachable
    parameter still holds a gradient from an earlier sweep (call
    ``zero_grad`` first).
    """
    if root.value.size != 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    leaves = [n for n in order if n.is_leaf]
    if any(n.grad is not None for n in leaves):
        raise BackwardError("parameter gradients already populated; reset them before another backward")
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = np.array(g, dtype=np.float64)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            k = id(parent)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    for n in leaves:
        if not np.all(np.isfinite(n.grad)):
            raise NonFiniteError("backward", "non-finite parameter gradient")


def numerical_grad(fn, params, h=1e-6):
    """Central finite-difference gradients of scalar ``fn()`` w.r.t. ``params``.

    ``fn`` is re-evaluated with each coordinate of each parameter perturbed in
    place; it must be deterministic (use fixed noise for stochastic objectives).
    """
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().value)
            flat[i] = orig - h
            down = float(fn().value)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out
