"""A small tape-based reverse-mode automatic differentiation engine.

Values are float64 numpy arrays.  Operations are recorded only while a
:class:`Tape` is active and at least one input requires a gradient, so the
same operator code serves both training (under a tape) and inference.

    with Tape() as tape:
        w = Tensor(w0, requires_grad=True)
        loss = sigmoid(w @ x).sum()
    grads = tape.backward(loss)   # {w: dL/dw}

A tape may be differentiated once; a second ``backward`` call raises
:class:`~conequery.errors.UsageError` because the recorded closures are
released after the first pass.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: object


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    records: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def backward(self, root: Tensor) -> dict:
        """Gradients of scalar ``root`` for every leaf that requires them."""
        if self.consumed:
            raise UsageError("this tape was already differentiated; re-run the forward pass")
        if root.data.size != 1:
            raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
        self.consumed = True
        produced = {id(r.out) for r in self.records}
        grads = {id(root): np.ones_like(root.data)}
        leaves = {}
        if root.requires_grad and id(root) not in produced:
            leaves[id(root)] = root
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if not np.all(np.isfinite(ig)):
                    raise NumericError(getattr(rec.backward, "op", "?"), "non-finite gradient in backward pass")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp
        self.records.clear()
        return {leaf: grads.get(key, np.zeros_like(leaf.data)) for key, leaf in leaves.items()}


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _make(op, value, inputs, backward):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericError(op)
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        backward.op = op
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


# element-wise binary

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make("multiply", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def divide(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("divide", "division by zero")
    return _make("divide", a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def minimum(a, b):
    """Pairwise minimum; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def where(mask, a, b):
    """Select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make("where", np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), back)


# element-wise unary

def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sin(x):
    x = as_tensor(x)
    return _make("sin", np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x):
    x = as_tensor(x)
    return _make("cos", np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow for large ``|x|``."""
    x = as_tensor(x)
    y = -np.logaddexp(0.0, -x.data)
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return _make("log_sigmoid", y, (x,), lambda g: (g * (1.0 - s),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),))


def abs_(x):
    x = as_tensor(x)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def arg(x, y, clamp=1e-3):
    """Four-quadrant angle of points ``(x, y)`` in ``[-pi, pi)``.

    Exactly-zero ``x`` entries are replaced by ``clamp`` before dividing.
    """
    x, y = as_tensor(x), as_tensor(y)
    xs = np.where(x.data == 0, clamp, x.data)
    yd = np.broadcast_to(y.data, np.broadcast_shapes(xs.shape, y.shape))
    beta = np.arctan(yd / xs)
    out = np.where((xs < 0) & (yd > 0), beta + np.pi, beta)
    out = np.where((xs < 0) & (yd < 0), beta - np.pi, out)
    out = np.where((xs < 0) & (yd == 0), -np.pi, out)
    out = np.where(out >= np.pi, out - 2 * np.pi, out)
    r2 = xs * xs + yd * yd

    def back(g):
        return _unbroadcast(-g * yd / r2, x.shape), _unbroadcast(g * xs / r2, y.shape)

    return _make("arg", out, (x, y), back)


# reductions

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    return _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,),
                 lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return _make("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,),
                 lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / n,))


def l1_norm(x, axis=-1):
    return sum_(abs_(x), axis=axis)


def min_(x, axis):
    """Minimum along ``axis``; the gradient goes to the first argmin."""
    x = as_tensor(x)
    idx = np.expand_dims(np.argmin(x.data, axis=axis), axis)
    value = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def back(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make("min", value, (x,), back)


def softmax(x, axis):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), back)


# structural

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"cannot stack shapes {sorted(shapes)}")

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make("stack", np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back)


def getitem(x, index):
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def back(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make("slice", x.data[index], (x,), back)


def take_rows(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradients."""
    return getitem(table, np.asarray(ids, dtype=np.intp))


def reshape(x, shape):
    x = as_tensor(x)
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def dropout(x, rate, training, rng):
    """Inverted dropout; the identity when ``training`` is false."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# numerical gradient checking

@dataclass
class GradCheckResult:
    max_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: list

    @property
    def ok(self):
        return self.max_error < 1e-4


def grad_check(f, x, step=1e-6, kink_tol=1e-3):
    """Compare the tape gradient of scalar ``f(Tensor)`` with central differences.

    Coordinates where the one-sided difference quotients disagree by more
    than ``kink_tol`` straddle a non-differentiable point (a min tie, a relu
    kink, a branch cut); they are listed in ``excluded`` and left out of
    ``max_error``.

    The relative error divides by ``max(|analytic|, |numeric|, floor)``.  The
    floor is the smallest gradient whose difference quotient still resolves
    a relative error of ``1e-4`` given round-off in ``f``
    (``1e4 * eps * max(1, |f|) / step``), so gradients that are zero up to
    that resolution are compared on an absolute scale.
    """
    x0 = np.array(x, dtype=np.float64)
    with Tape() as tape:
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = f(leaf)
    analytic = tape.backward(out).get(leaf, np.zeros_like(x0))

    def value(arr):
        return float(f(Tensor(arr)).data)

    f0 = value(x0)
    floor = max(1e-8, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / step)
    numeric = np.zeros_like(x0)
    errors = np.zeros_like(x0)
    excluded = []
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = value(plus.reshape(x0.shape))
        fm = value(minus.reshape(x0.shape))
        num = (fp - fm) / (2 * step)
        numeric.reshape(-1)[i] = num
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(num)):
            excluded.append(np.unravel_index(i, x0.shape))
            continue
        a = analytic.reshape(-1)[i]
        errors.reshape(-1)[i] = abs(a - num) / max(abs(a), abs(num), floor)
    return GradCheckResult(float(errors.max()) if errors.size else 0.0, analytic, numeric, excluded)


def offset(x, value):
    """Return ``value`` with an identity gradient to ``x``.

    For maps that differ from the identity by a locally constant shift, such
    as angle wrapping; the forward value is taken verbatim so it matches a
    non-differentiable reference bit for bit.
    """
    x = as_tensor(x)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != x.shape:
        raise ShapeError(f"offset value shape {value.shape} != {x.shape}")
    return _make("offset", value, (x,), lambda g: (g,))
