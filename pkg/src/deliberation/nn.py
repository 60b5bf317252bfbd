"""Parameter containers and the layers shared by every model."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for n, arr in state.items():
            if n not in own:
                continue
            if own[n].shape != np.shape(arr):
                raise ValueError(f"{n}: shape {np.shape(arr)} != {own[n].shape}")
            own[n].data = np.array(arr, dtype=np.float64)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def num_params(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, scale=1.0):
        self.w = Parameter(rng.normal(0.0, scale / np.sqrt(d_in), size=(d_in, d_out)))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d):
        self.g = Parameter(np.ones(d))
        self.b = Parameter(np.zeros(d))

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)


def build_attention_mask(length, left_context=None, right_context=None):
    """mask[i, j] is True iff i - left <= j <= i + right (None = unbounded)."""
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    ok = np.ones((length, length), dtype=bool)
    if left_context is not None:
        ok &= j >= i - left_context
    if right_context is not None:
        ok &= j <= i + right_context
    return ok


def full_mask(length, valid, left_context=None, right_context=None):
    """Band mask combined with key validity, shape (B, 1, T, T).

    Padded query rows may always see themselves so no row is empty.
    """
    band = build_attention_mask(length, left_context, right_context)
    valid = np.asarray(valid, dtype=bool)
    m = band[None] & valid[:, None, :]
    m |= np.eye(length, dtype=bool)[None] & ~valid[:, :, None]
    return m[:, None]


def sinusoid(length, d):
    pos = np.arange(length)[:, None]
    k = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (k // 2)) / d)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


class SelfAttention(Module):
    def __init__(self, d, heads, rng):
        if d % heads:
            raise ValueError("model dim must divide by heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)

    def __call__(self, x, mask):
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.reshape(self.qkv(x), (b, n, 3, h, dh))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, B, H, N, dh
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        att = T.softmax(scores, axis=-1, mask=mask)
        ctx = T.matmul(att, v)  # B, H, N, dh
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, d, d_ff, rng):
        self.w1 = Linear(d, d_ff, rng)
        self.w2 = Linear(d_ff, d, rng)

    def __call__(self, x):
        return self.w2(T.relu(self.w1(x)))


class Block(Module):
    """Pre-norm self-attention + feedforward with residuals."""

    def __init__(self, d, heads, d_ff, rng):
        self.ln1 = LayerNorm(d)
        self.att = SelfAttention(d, heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)

    def __call__(self, x, mask):
        x = x + self.att(self.ln1(x), mask)
        return x + self.ff(self.ln2(x))
