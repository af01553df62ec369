"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation creates a node that remembers
its operand tensors and a backward closure. ``backward`` replays the
subgraph reachable from the loss in exact reverse insertion order, which
is a valid topological order because operands always exist before their
consumers.

Gradients accumulate on leaf tensors (parameters, inputs) across repeated
``backward`` calls until ``zero_grad``; interior nodes get their gradient
from the most recent call only.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateInput(ValueError):
    """Input is numerically degenerate (e.g. a near-zero row fed to a normalizer)."""


_insertion_counter = itertools.count()

# When False, new nodes drop their parents and backward closures. Used for
# evaluation passes and finite-difference loops where gradients are not needed.
_grad_enabled = True


class no_grad:
    """Context manager disabling graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_order")

    # keep numpy from consuming `ndarray <op> Tensor`; defer to our reflected ops
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._order = next(_insertion_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Constant copy of this tensor's values; no gradient flows through it."""
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    @property
    def T(self):
        return transpose(self)

    # -- reductions / elementwise ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def logsumexp(self, axis, keepdims=False):
        return logsumexp(self, axis=axis, keepdims=keepdims)

    def take_rows(self, indices):
        return gather_rows(self, indices)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, backward_fn):
    """Create an interior node; records the graph only when a parent needs it."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0.0), (a,), backward)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g * _sigmoid(a.data),)

    return _node(out, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a, axis, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_keep = np.log(s) + m
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    softmax = np.exp(a.data - out_keep)

    def backward(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * softmax,)

    return _node(out, (a,), backward)


def gather_rows(a, indices):
    """Select rows ``a[indices]``; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(
            f"row index out of range [0, {a.data.shape[0]}): {idx.min()}..{idx.max()}"
        )
    out = a.data[idx]

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        return (acc,)

    return _node(out, (a,), backward)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_rows needs at least one tensor")
    widths = {t.data.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise ShapeMismatch(f"concat_rows trailing shapes differ: {sorted(widths)}")
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def backward(g):
        grads, start = [], 0
        for n in sizes:
            grads.append(g[start:start + n])
            start += n
        return tuple(grads)

    return _node(out, tuple(tensors), backward)


def l2_normalize(a, degenerate_below=1e-12):
    """Scale each row of a 2-D tensor to unit Euclidean norm.

    Rows with norm below ``degenerate_below`` raise instead of being divided.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("l2_normalize expects a 2-D tensor")
    norms = np.sqrt((a.data * a.data).sum(axis=1))
    if np.any(norms < degenerate_below):
        bad = int(np.argmin(norms))
        raise DegenerateInput(
            f"row {bad} has norm {norms[bad]:.3e} < {degenerate_below:.0e}"
        )
    norm_t = sqrt(tsum(mul(a, a), axis=1, keepdims=True))
    return div(a, norm_t)


def backward(loss):
    """Accumulate gradients of a scalar loss onto every requires_grad tensor.

    Visits the reachable subgraph in exact reverse insertion order. Leaf
    gradients accumulate across calls; interior gradients are overwritten.
    """
    loss = as_tensor(loss)
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward requires a scalar loss, got {loss.data.shape}")
    if not loss.requires_grad:
        return

    reachable = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable[id(node)] = node
        stack.extend(node._parents)

    pending = {id(loss): np.ones_like(loss.data)}
    for node in sorted(reachable.values(), key=lambda n: n._order, reverse=True):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.is_leaf and node.grad is not None:
                node.grad = node.grad + g
            else:
                node.grad = g.copy()
        if node._backward_fn is None:
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def grad_check(fn, params, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds and returns the scalar loss from ``params`` on each call.
    Relative error per coordinate is |analytic - cd| / (|analytic| + |cd| + 1e-12).
    """
    for p in params:
        p.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ShapeMismatch("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]

    worst = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = fn().item()
                flat[i] = orig - h
                f_minus = fn().item()
                flat[i] = orig
                cd = (f_plus - f_minus) / (2.0 * h)
                err = abs(an_flat[i] - cd) / (abs(an_flat[i]) + abs(cd) + 1e-12)
                worst = max(worst, err)
    return worst
