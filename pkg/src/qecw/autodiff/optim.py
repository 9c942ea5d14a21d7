"""AdamW with decoupled weight decay, the warmup+cosine schedule, and clipping."""

from __future__ import annotations

import math

import numpy as np

from .nn import Parameter


class AdamW:
    def __init__(self, named_params, lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            if p.mask is not None:
                g = g * p.mask
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            if p.mask is not None:
                p.data *= p.mask

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors = {f"opt.m.{k}": v for k, v in self.m.items()}
        tensors.update({f"opt.v.{k}": v for k, v in self.v.items()})
        meta = {"step": self.step_count, "lr": self.lr, "betas": [self.beta1, self.beta2], "eps": self.eps,
                "weight_decay": self.weight_decay}
        return tensors, meta

    def load_state_dict(self, tensors: dict[str, np.ndarray], meta: dict):
        for name, _ in self.params:
            self.m[name] = tensors[f"opt.m.{name}"].copy()
            self.v[name] = tensors[f"opt.v.{name}"].copy()
        self.step_count = int(meta["step"])
        self.lr = float(meta["lr"])
        self.beta1, self.beta2 = meta["betas"]
        self.eps = float(meta["eps"])
        self.weight_decay = float(meta["weight_decay"])


def lr_schedule(epoch: float, warmup: float = 5, decay_end: float = 80, base: float = 5e-4,
                min_lr: float = 1e-6) -> float:
    """Linear warmup from 0, cosine to ``min_lr`` at ``decay_end``, flat after.  Epoch may be fractional."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < warmup:
        return base * epoch / warmup
    if epoch >= decay_end:
        return min_lr
    frac = (epoch - warmup) / (decay_end - warmup)
    return min_lr + (base - min_lr) * 0.5 * (1 + math.cos(math.pi * frac))


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total
