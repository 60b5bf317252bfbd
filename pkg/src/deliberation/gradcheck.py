"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import backward


def numerical_grad(f, arrays, index, eps=1e-6):
    """d f / d arrays[index] by central differences; ``f`` reads the arrays in place."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_gradients(loss_fn, tensors, eps=1e-6, max_entries=None, rng=None):
    """Compare autograd gradients of ``loss_fn()`` against finite differences.

    ``tensors`` are leaf Tensors with requires_grad. With ``max_entries``
    only a random subset of coordinates per tensor is probed. Returns the
    worst relative error over all tensors.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        x = t.data
        flat = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            flat = (rng or np.random.default_rng(0)).choice(x.size, size=max_entries, replace=False)
        num = np.zeros(len(flat))
        for j, fi in enumerate(flat):
            i = np.unravel_index(fi, x.shape)
            old = x[i]
            x[i] = old + eps
            fp = loss_fn().item()
            x[i] = old - eps
            fm = loss_fn().item()
            x[i] = old
            num[j] = (fp - fm) / (2 * eps)
        ana = ga.reshape(-1)[flat]
        worst = max(worst, rel_error(ana, num))
    return worst
