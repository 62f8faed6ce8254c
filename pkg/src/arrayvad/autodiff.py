"""Reverse-mode automatic differentiation over numpy arrays.

The engine records a directed acyclic graph as operations run: every Tensor
produced by an op keeps references to its parents and a closure that routes
the incoming gradient to them. ``backward`` replays the tape in reverse
topological order. All values are float64; gradients are plain numpy arrays
of the same shape as their tensor.

Design points that matter for the rest of the package:

* Constants fold away. An op whose inputs all have ``requires_grad=False``
  returns a leaf constant, so graphs only contain the differentiable spine.
* Broadcasting follows numpy rules; backward sums gradients over broadcast
  axes (`_unbroadcast`).
* A few primitives make subgradient choices at non-differentiable points:
  ``sqrt`` and ``complex_abs`` return gradient 0 at 0, and ``atan2`` returns
  gradient 0 at the origin. These keep training finite on silent frames.
* Graph replay order is the construction order, so gradients are bitwise
  reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError


class Tensor:
    """A node in the autodiff graph wrapping a float64 numpy array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -------------------------------------------------------

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
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def log(self):
        return tlog(self)

    def exp(self):
        return texp(self)

    def sqrt(self):
        return tsqrt(self)

    def cos(self):
        return tcos(self)

    def sin(self):
        return tsin(self)


def as_tensor(x):
    """Wrap ``x`` as a constant Tensor unless it already is one."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    """A leaf tensor that accumulates gradients. ``name`` is unused here but
    keeps call sites self-describing."""
    del name
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data, parents, backward):
    """Create an op result; folds to a constant when nothing needs grad."""
    need = any(p.requires_grad for p in parents)
    out = Tensor(data)
    if need:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def power(a, exponent):
    a = as_tensor(a)
    if not isinstance(exponent, (int, float)):
        raise ArgumentError("power exponent must be a python scalar")
    e = float(exponent)

    def backward(g):
        _accum(a, g * e * np.power(a.data, e - 1.0))

    return _make(np.power(a.data, e), (a,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def getitem(a, key):
    a = as_tensor(a)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _accum(a, buf)

    return _make(a.data[key], (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = np.prod([a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ArgumentError("matmul expects tensors with at least 2 dimensions")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# -- nonlinearities -----------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def tlog(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def texp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def tsqrt(a):
    """Square root with gradient 0 at 0 (subgradient choice)."""
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out_data > 0, out_data, 1.0)
        _accum(a, np.where(out_data > 0, 0.5 * g / safe, 0.0))

    return _make(out_data, (a,), backward)


def tcos(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g * np.sin(a.data))

    return _make(np.cos(a.data), (a,), backward)


def tsin(a):
    a = as_tensor(a)

    def backward(g):
        _accum(a, g * np.cos(a.data))

    return _make(np.sin(a.data), (a,), backward)


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make(y, (a,), backward)


def atan2(y, x):
    """Four-quadrant arctangent. Gradient is 0 at the origin."""
    y, x = as_tensor(y), as_tensor(x)
    r2 = x.data * x.data + y.data * y.data

    def backward(g):
        safe = np.where(r2 > 0, r2, 1.0)
        _accum(y, np.where(r2 > 0, g * x.data / safe, 0.0))
        _accum(x, np.where(r2 > 0, -g * y.data / safe, 0.0))

    return _make(np.arctan2(y.data, x.data), (y, x), backward)


def complex_abs(re, im):
    """Magnitude of re + j*im with gradient 0 where the magnitude is 0."""
    re, im = as_tensor(re), as_tensor(im)
    out_data = np.hypot(re.data, im.data)

    def backward(g):
        safe = np.where(out_data > 0, out_data, 1.0)
        _accum(re, np.where(out_data > 0, g * re.data / safe, 0.0))
        _accum(im, np.where(out_data > 0, g * im.data / safe, 0.0))

    return _make(out_data, (re, im), backward)


def complex_mul(a_re, a_im, b_re, b_im):
    """Product of two complex values given as (re, im) tensor pairs."""
    re = sub(mul(a_re, b_re), mul(a_im, b_im))
    im = add(mul(a_re, b_im), mul(a_im, b_re))
    return re, im


def complex_angle(re, im):
    """Phase of re + j*im; gradient 0 at zero magnitude (see atan2)."""
    return atan2(im, re)


# -- backward pass ------------------------------------------------------------


def _topo_order(root):
    """Iterative post-order over the reachable differentiable graph."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss):
    """Run the reverse sweep from scalar ``loss``, filling ``grad`` fields.

    Raises NumericError if the forward value is not finite; nothing is
    propagated in that case.
    """
    if loss.data.size != 1:
        raise ArgumentError("backward expects a scalar loss")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss; refusing to backpropagate")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad(loss, params):
    """Gradients of ``loss`` for a name -> Tensor mapping.

    Parameters not reached by the graph get zero arrays, so optimizer updates
    stay total over the parameter set.
    """
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out
