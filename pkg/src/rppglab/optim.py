"""Adaptive gradient optimizer with decoupled weight decay and cosine decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Decoupled-weight-decay Adam over a dict of DiffValue parameters.

    Gradients are clipped to a global norm before the update; transient
    spikes through the recurrence otherwise throw the moments off for many
    steps.
    """

    def __init__(self, params, lr=1e-4, weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8, clip_norm=10.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr=None, grad_scale=1.0):
        lr = self.lr if lr is None else lr
        self.t += 1
        clip = 1.0
        if self.clip_norm is not None:
            sq = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    g = p.grad * grad_scale
                    sq += float(np.sum(g * g))
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                clip = self.clip_norm / norm
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * (grad_scale * clip)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                    + self.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def cosine_lr(base_lr, epoch, total_epochs):
    """Cosine annealing from base_lr toward zero across the run."""
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / (total_epochs - 1)))
