"""Minimal define-by-run reverse-mode automatic differentiation on numpy arrays.

Every primitive accepts plain arrays or :class:`Var` nodes. When none of the
inputs is a ``Var`` the primitive returns a plain ``ndarray``, so the same
model code runs untracked (fast inference) or tracked (training).

>>> x = Var(np.array(3.0), requires_grad=True)
>>> y = square(x)
>>> backward(y)
>>> float(x.grad)
6.0
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Var:
    """Graph node: a value, its gradient and the rule to push gradients to parents."""

    __slots__ = ("value", "grad", "parents", "op", "_backward", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, parents=(), op="leaf", backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.op = op
        self._backward = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tracked(*xs):
    return any(isinstance(x, Var) for x in xs)


def _node(value, parents, op, backward_fn):
    ps = tuple(p for p in parents if isinstance(p, Var))
    return Var(value, ps, op, backward_fn)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _accumulate(node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {np.shape(a)} and {np.shape(b)}") from None


# --------------------------------------------------------------------------- elementwise binary


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("add", av, bv)
    out = av + bv
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _accumulate(b, _unbroadcast(g, bv.shape))

    return _node(out, (a, b), "add", bw)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("sub", av, bv)
    out = av - bv
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            _accumulate(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _accumulate(b, _unbroadcast(-g, bv.shape))

    return _node(out, (a, b), "sub", bw)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("mul", av, bv)
    out = av * bv
    if not _tracked(a, b):
        return out

    def bw(g):
        if isinstance(a, Var):
            _accumulate(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            _accumulate(b, _unbroadcast(g * av, bv.shape))

    return _node(out, (a, b), "mul", bw)


def logaddexp(a, b):
    av, bv = value_of(a), value_of(b)
    _check_broadcast("logaddexp", av, bv)
    out = np.logaddexp(av, bv)
    if not _tracked(a, b):
        return out

    def bw(g):
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(av), 0.0, np.exp(av - out))
            wb = np.where(np.isneginf(bv), 0.0, np.exp(bv - out))
        if isinstance(a, Var):
            _accumulate(a, _unbroadcast(g * wa, av.shape))
        if isinstance(b, Var):
            _accumulate(b, _unbroadcast(g * wb, bv.shape))

    return _node(out, (a, b), "logaddexp", bw)


def atan2(y, x):
    """Angle of (x, y) in (-pi, pi]."""
    yv, xv = value_of(y), value_of(x)
    _check_broadcast("atan2", yv, xv)
    out = np.arctan2(yv, xv)
    if not _tracked(y, x):
        return out

    def bw(g):
        r2 = xv * xv + yv * yv
        if isinstance(y, Var):
            _accumulate(y, _unbroadcast(g * xv / r2, yv.shape))
        if isinstance(x, Var):
            _accumulate(x, _unbroadcast(-g * yv / r2, xv.shape))

    return _node(out, (y, x), "atan2", bw)


# --------------------------------------------------------------------------- elementwise unary


def _unary(x, fwd, dfdx, op):
    """``dfdx(x_value, out_value)`` returns the local derivative."""
    xv = value_of(x)
    out = fwd(xv)
    if not isinstance(x, Var):
        return out

    def bw(g):
        _accumulate(x, g * dfdx(xv, out))

    return _node(out, (x,), op, bw)


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x):
    return _unary(x, _sigmoid, lambda v, s: s * (1.0 - s), "sigmoid")


def tanh(x):
    return _unary(x, np.tanh, lambda v, t: 1.0 - t * t, "tanh")


def relu(x):
    # derivative at 0 uses the right-hand value (1)
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, o: (v >= 0).astype(np.float64), "relu")


def leaky_relu(x, slope=0.01):
    return _unary(x, lambda v: np.where(v >= 0, v, slope * v),
                  lambda v, o: np.where(v >= 0, 1.0, slope), "leaky_relu")


def square(x):
    return _unary(x, np.square, lambda v, o: 2.0 * v, "square")


def exp(x):
    return _unary(x, np.exp, lambda v, o: o, "exp")


def log(x):
    return _unary(x, np.log, lambda v, o: 1.0 / v, "log")


def sin(x):
    return _unary(x, np.sin, lambda v, o: np.cos(v), "sin")


def cos(x):
    return _unary(x, np.cos, lambda v, o: -np.sin(v), "cos")


def mod(x, m):
    """``x mod m``; the gradient is taken as 1 (piecewise identity)."""
    return _unary(x, lambda v: np.mod(v, m), lambda v, o: np.ones_like(v), "mod")


# --------------------------------------------------------------------------- linear algebra


def matmul(a, b):
    """numpy ``matmul`` with broadcasting over leading axes."""
    av, bv = value_of(a), value_of(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}") from None
    if not _tracked(a, b):
        return out

    def bw(g):
        a2 = av if av.ndim > 1 else av[None, :]
        b2 = bv if bv.ndim > 1 else bv[:, None]
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if isinstance(a, Var):
            ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
            if av.ndim == 1:
                ga = ga[..., 0, :]
            _accumulate(a, _unbroadcast(ga, av.shape))
        if isinstance(b, Var):
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
            if bv.ndim == 1:
                gb = gb[..., 0]
            _accumulate(b, _unbroadcast(gb, bv.shape))

    return _node(out, (a, b), "matmul", bw)


def affine(x, w, b):
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    xv, wv = value_of(x), value_of(w)
    if xv.shape[-1] != wv.shape[-2]:
        raise ShapeError(f"affine: input shape {xv.shape} does not match weight shape {wv.shape}")
    return add(matmul(x, w), b)


# --------------------------------------------------------------------------- structure


def concat(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in vals]}") from None
    if not _tracked(*xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            if isinstance(x, Var):
                _accumulate(x, part)

    return _node(out, xs, "concat", bw)


def stack(xs, axis=0):
    vals = [value_of(x) for x in xs]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[v.shape for v in vals]}") from None
    if not _tracked(*xs):
        return out

    def bw(g):
        for i, x in enumerate(xs):
            if isinstance(x, Var):
                _accumulate(x, np.take(g, i, axis=axis))

    return _node(out, xs, "stack", bw)


def broadcast_to(x, shape):
    xv = value_of(x)
    try:
        out = np.broadcast_to(xv, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {xv.shape} to {shape}") from None
    if not isinstance(x, Var):
        return out
    return _node(out, (x,), "broadcast", lambda g: _accumulate(x, _unbroadcast(g, xv.shape)))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not isinstance(x, Var):
        return out
    return _node(out, (x,), "reshape", lambda g: _accumulate(x, g.reshape(xv.shape)))


def getitem(x, key):
    xv = value_of(x)
    out = xv[key]
    if not isinstance(x, Var):
        return out

    def bw(g):
        full = np.zeros_like(xv)
        np.add.at(full, key, g)
        _accumulate(x, full)

    return _node(np.array(out), (x,), "getitem", bw)


def gather_rows(x, idx):
    """``out[b, k] = x[b, idx[b, k]]`` along axis 1; ``idx`` is a constant."""
    xv = value_of(x)
    idx = np.asarray(idx)
    if idx.shape[0] != xv.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not match {xv.shape}")
    rows = np.arange(xv.shape[0])[:, None]
    out = xv[rows, idx]
    if not isinstance(x, Var):
        return out

    def bw(g):
        full = np.zeros_like(xv)
        np.add.at(full, (rows, idx), g)
        _accumulate(x, full)

    return _node(out, (x,), "gather_rows", bw)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    xv = value_of(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, xv.shape))

    return _node(out, (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    xv = value_of(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def log_sum_exp(x, axis=-1, keepdims=False):
    """Stable ``log(sum(exp(x)))``; ``-inf`` entries count as exact zeros."""
    xv = value_of(x)
    m = np.max(xv, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_k = np.log(np.sum(np.exp(xv - m), axis=axis, keepdims=True)) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    if not isinstance(x, Var):
        return out

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            soft = np.where(np.isneginf(xv), 0.0, np.exp(xv - out_k))
        _accumulate(x, g * soft)

    return _node(out, (x,), "log_sum_exp", bw)


def normalize_log_weights(w, axis=-1):
    """``w - LogSumExp(w)`` so that the weights sum to one."""
    return sub(w, log_sum_exp(w, axis=axis, keepdims=True))


# --------------------------------------------------------------------------- layers


def batch_norm(x, gamma, beta, axis=0, eps=1e-5, running=None, training=True, momentum=0.1):
    """Normalize ``x`` over ``axis`` (int or tuple) per remaining feature.

    ``running`` is a dict holding ``mean`` and ``var`` arrays; it is updated in
    training mode and used instead of batch statistics otherwise.
    """
    xv = value_of(x)
    axes = tuple(np.atleast_1d(axis) % xv.ndim)
    if training:
        mu = xv.mean(axis=axes, keepdims=True)
        var = xv.var(axis=axes, keepdims=True)
        if running is not None:
            n = int(np.prod([xv.shape[a] for a in axes]))
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running["mean"] = (1 - momentum) * running["mean"] + momentum * np.squeeze(mu, axes)
            running["var"] = (1 - momentum) * running["var"] + momentum * np.squeeze(unbiased, axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv
    else:
        if running is None:
            raise ValueError("batch_norm in inference mode needs running statistics")
        shape = [1 if i in axes else s for i, s in enumerate(xv.shape)]
        inv = 1.0 / np.sqrt(np.reshape(running["var"], shape) + eps)
        xhat = (xv - np.reshape(running["mean"], shape)) * inv
    gv, bv = value_of(gamma), value_of(beta)
    out = xhat * gv + bv
    if not _tracked(x, gamma, beta):
        return out

    def bw(g):
        if isinstance(gamma, Var):
            _accumulate(gamma, _unbroadcast(g * xhat, gv.shape))
        if isinstance(beta, Var):
            _accumulate(beta, _unbroadcast(g, bv.shape))
        if isinstance(x, Var):
            gx = g * gv
            if training:
                gx = inv * (gx - gx.mean(axis=axes, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            else:
                gx = gx * inv
            _accumulate(x, gx)

    return _node(out, (x, gamma, beta), "batch_norm", bw)


def gaussian_sample(mu, sigma, rng):
    """Reparametrized draw ``mu + sigma * eps``; ``eps`` is a recorded constant."""
    shape = np.broadcast_shapes(value_of(mu).shape, value_of(sigma).shape)
    eps = rng.standard_normal(shape)
    return add(mu, mul(sigma, eps))


def _im2col(x, kh, kw, stride, padding):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, oh * ow), oh, ow, xp.shape


def conv2d(x, w, b, stride=1, padding=0):
    """Single-image 2D convolution: ``x`` (C, H, W), ``w`` (O, C, kh, kw), ``b`` (O,)."""
    xv, wv = value_of(x), value_of(w)
    if xv.ndim != 3 or wv.ndim != 4 or wv.shape[1] != xv.shape[0]:
        raise ShapeError(f"conv2d: input {xv.shape} incompatible with kernel {wv.shape}")
    o, c, kh, kw = wv.shape
    if xv.shape[1] + 2 * padding < kh or xv.shape[2] + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {xv.shape} smaller than kernel {wv.shape}")
    cols, oh, ow, pshape = _im2col(xv, kh, kw, stride, padding)
    wmat = wv.reshape(o, -1)
    out = (wmat @ cols).reshape(o, oh, ow) + value_of(b)[:, None, None]
    if not _tracked(x, w, b):
        return out

    def bw(g):
        g2 = g.reshape(o, -1)
        if isinstance(b, Var):
            _accumulate(b, g2.sum(axis=1))
        if isinstance(w, Var):
            _accumulate(w, (g2 @ cols.T).reshape(wv.shape))
        if isinstance(x, Var):
            dcols = (wmat.T @ g2).reshape(c, kh, kw, oh, ow)
            dxp = np.zeros(pshape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, i, j]
            _accumulate(x, dxp[:, padding:padding + xv.shape[1], padding:padding + xv.shape[2]])

    return _node(out, (x, w, b), "conv2d", bw)


# --------------------------------------------------------------------------- backward pass


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output):
    """Populate ``.grad`` on every node reachable from the scalar ``output``."""
    if not isinstance(output, Var):
        raise TypeError("backward needs a Var")
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topo_order(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.value)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node.parents:
                node._backward = None  # free closures; graphs are single-use


def parameter(value):
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True)
