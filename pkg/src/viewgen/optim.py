"""Adam/AdamW and learning-rate schedules for tape tensors."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0,
              min_lr: float = 0.0) -> float:
    """Linear warm-up followed by cosine decay to ``min_lr``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients in place to a joint L2 norm of at most ``max_norm``.

    Returns the norm before clipping; a non-finite value is returned as is so
    the caller can treat it as divergence.
    """
    params = [p for p in params if p.grad is not None]
    with np.errstate(over="ignore", invalid="ignore"):
        total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if not math.isfinite(total):
        return total
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class AdamW:
    """Adam with decoupled weight decay.

    Parameters listed in ``lazy`` are updated row-wise only where their
    gradient row is non-zero, so rows untouched by a step (e.g. codebook
    entries nobody selected) keep their exact values.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 lazy: Sequence[Tensor] = ()):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._lazy = {id(p) for p in lazy}
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if id(p) in self._lazy:
                rows = np.flatnonzero(np.any(g.reshape(g.shape[0], -1) != 0, axis=1))
                if rows.size == 0:
                    continue
                gr = g[rows]
                m[rows] = self.beta1 * m[rows] + (1 - self.beta1) * gr
                v[rows] = self.beta2 * v[rows] + (1 - self.beta2) * gr * gr
                upd = (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
                p.data[rows] = p.data[rows] * (1.0 - lr * self.weight_decay) - lr * upd
                continue
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * upd

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v
