"""Adam with bias correction, plus linear-warmup learning rate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One in-place Adam update over ``params`` (name -> ndarray).

    ``grads`` maps the same names to gradient arrays; a missing or None
    gradient counts as zero.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def warmup_lr(step, total_steps, base_lr, warmup_frac=0.1):
    """Linear warmup over the first ``warmup_frac`` of training, then constant."""
    warm = int(total_steps * warmup_frac)
    if warm <= 0 or step >= warm:
        return base_lr
    return base_lr * (step + 1) / warm


class Adam:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip_norm=None):
        # named_params: list of (name, Tensor); tensors are updated in place
        self.params = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = AdamState()

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad))
                                 for _, p in self.params if p.grad is not None)))

    def step(self, lr=None):
        grads = {n: p.grad for n, p in self.params}
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {n: (None if g is None else g * scale) for n, g in grads.items()}
        adam_step({n: p.data for n, p in self.params}, grads, self.state,
                  self.lr if lr is None else lr, self.betas, self.eps)
