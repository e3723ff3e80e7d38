"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` replays them in reverse and accumulates gradients into the
``grad`` slot of leaf tensors. Nothing is zeroed automatically: callers reset
gradients between steps (the joint trainer runs two backward passes against
overlapping parameter sets and needs that control).
"""

from __future__ import annotations

import numpy as np

from . import kernels

GradientSet = dict  # parameter name -> gradient ndarray

_active_tapes: list["Tape"] = []


class ShapeError(ValueError):
    """Operand extents do not line up."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad=False, name=None):
        d = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = d if d.flags.c_contiguous else d.copy()
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.ops = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.pop()
        return False

    def __len__(self):
        return len(self.ops)


def _record(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    if _active_tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        _active_tapes[-1].ops.append((out, inputs, backward_fn))
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns the touched named leaves as a ``GradientSet`` (name -> the leaf's
    accumulated gradient array, not a copy).
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    touched = {}
    for out, inputs, fn in reversed(tape.ops):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                if t.grad is None:
                    t.grad = np.array(gi, dtype=np.float64)
                else:
                    t.grad += gi
                if t.name is not None:
                    touched[t.name] = t.grad
            else:
                prev = pending.get(id(t))
                pending[id(t)] = gi if prev is None else prev + gi
    return touched


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _record(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c):
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def tanh(a):
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu(a):
    x2 = _rows(a.data)
    y = kernels.gelu_fwd(x2).reshape(a.shape)
    return _record(y, (a,), lambda g: (kernels.gelu_bwd(x2, _rows(g)).reshape(a.shape),))


def dropout(a, p, rng):
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product.

    ``b`` 2-D: ``a`` may carry leading batch axes (applied row-wise).
    ``b`` N-D: batched product with identical leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def fn(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        return _record(ad @ bd, (a, b), fn)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} @ {b.shape}")

    def fn(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return _record(ad @ bd, (a, b), fn)


def transpose(a, axes):
    inv = np.argsort(axes)
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a, idx):
    """Rows ``a[idx]`` along axis 0 (embedding lookup / gather)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def fn(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)
    return _record(a.data[idx], (a,), fn)


def concat(tensors, axis=0):
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------- reductions

def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a):
    return scale(sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------- normalisation

def softmax(a, mask=None):
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``a.shape``; False entries
    receive probability exactly 0.
    """
    x2 = _rows(a.data)
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(
            np.broadcast_to(np.asarray(mask, dtype=bool), a.shape).reshape(x2.shape)
        ).view(np.uint8)
    y2 = kernels.softmax_fwd(x2, m2)
    return _record(y2.reshape(a.shape), (a,),
                   lambda g: (kernels.softmax_bwd(y2, _rows(g)).reshape(a.shape),))


def log_softmax(a):
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _record(y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last axis {d}")
    y2, xhat, rstd = kernels.layer_norm_fwd(_rows(x.data), gamma.data, beta.data, float(eps))
    shape = x.shape
    gd = gamma.data

    def fn(g):
        dx, dgamma, dbeta = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gd)
        return dx.reshape(shape), dgamma, dbeta
    return _record(y2.reshape(shape), (x, gamma, beta), fn)


# ---------------------------------------------------------------- losses

def mse(a, b, weight=None):
    """Mean squared error over elements.

    ``weight`` (constant array, shape of ``a``) selects/weights elements; the
    mean is taken over ``weight.sum()`` instead of ``a.size``.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    if weight is None:
        n = d.size
        w = 1.0
    else:
        w = np.broadcast_to(weight, d.shape)
        n = float(w.sum())
    val = np.array(float((w * d * d).sum()) / n)

    def fn(g):
        gd = (2.0 * float(g) / n) * (w * d)
        return gd, -gd
    return _record(val, (a, b), fn)


def soft_cross_entropy(target_probs, logits):
    """Mean over rows of -sum(p * log_softmax(logits)); ``target_probs`` is constant."""
    p = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs)
    lsm = log_softmax(logits)
    rows = p.size // p.shape[-1]
    return scale(sum(mul(Tensor(p), lsm)), -1.0 / rows)


def cross_entropy(logits, labels):
    """Mean hard-label cross entropy; ``logits`` is (rows, classes)."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return soft_cross_entropy(onehot, logits)


def bce_with_logits(x, y):
    """Mean binary cross entropy on sigmoid(x) against 0/1 targets ``y``."""
    xd = x.data
    y = np.asarray(y, dtype=np.float64).reshape(xd.shape)
    loss = np.maximum(xd, 0) - xd * y + np.log1p(np.exp(-np.abs(xd)))
    n = xd.size
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _record(np.array(loss.mean()), (x,), lambda g: (float(g) * (sig - y) / n,))
