"""Dense float64 tensors with a reverse-mode gradient tape.

Every op records its parents and a closure mapping the output gradient to
parent gradients. The tape is rebuilt on every forward pass; nothing is
compiled or fused.
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self):
        backward(self)

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mean(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every upstream tensor.

    Leaf gradients add onto whatever is already stored; intermediate
    gradients are overwritten on each call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(x):
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    pos = x.data > 0
    return _node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batching rules over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # (..., k) @ (k, n): fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],)), (a, b), bw2)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` for x (..., k), w (k, n), b (n,) as a single tape node."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {xd.shape} @ {wd.shape}")
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _node(y.reshape(xd.shape[:-1] + (wd.shape[1],)), parents, bw)


# reductions ----------------------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x):
    n = x.size
    shape = x.shape
    return _node(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),))


def logsumexp(x, axis=-1, keepdims=False):
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
    out = m + np.log(s)
    w = np.exp(x.data - out)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return _node(out if keepdims else np.squeeze(out, axis), (x,), bw)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    The row max is subtracted before exponentiation.
    """
    z = x.data
    if np.isnan(z).any():
        raise FloatingPointError("softmax received NaN input")
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = np.max(z, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax row has no unmasked entries")
    e = np.exp(z - m)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    z = x.data
    m = np.max(z, axis=axis, keepdims=True)
    out = z - m - np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gd.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _node(xhat * gd + beta.data, (x, gamma, beta), bw)


# structural ----------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, idx):
    shape = x.shape

    scatter = _needs_scatter_add(idx)

    def bw(g):
        out = np.zeros(shape)
        if scatter:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _node(x.data[idx], (x,), bw)


def _needs_scatter_add(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def bw(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding ids outside [0, {vocab})")
    return _node(table.data[ids], (table,), bw)


# losses --------------------------------------------------------------------

def cross_entropy_masked(logits, targets, loss_mask):
    """Mean of -log softmax(logits)[target] over positions where loss_mask is set.

    ``logits`` has shape (..., V); ``targets`` and ``loss_mask`` share the
    leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    z = logits.data
    vocab = z.shape[-1]
    if targets.shape != z.shape[:-1] or loss_mask.shape != targets.shape:
        raise ShapeError(f"logits {z.shape} vs targets {targets.shape} vs mask {loss_mask.shape}")
    count = int(loss_mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_masked: loss mask selects no positions")
    sel_t = targets[loss_mask]
    if sel_t.size and (sel_t.min() < 0 or sel_t.max() >= vocab):
        raise IndexError(f"targets outside [0, {vocab})")
    m = np.max(z, axis=-1, keepdims=True)
    logp = z - m - np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    safe_t = np.where(loss_mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -np.sum(picked[loss_mask]) / count

    def bw(g):
        d = np.exp(logp)
        np.put_along_axis(d, safe_t[..., None],
                          np.take_along_axis(d, safe_t[..., None], axis=-1) - 1.0, axis=-1)
        d *= (loss_mask[..., None] * (g / count))
        return (d,)

    return _node(np.asarray(loss), (logits,), bw)
