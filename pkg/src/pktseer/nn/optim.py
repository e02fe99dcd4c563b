"""Adam with bias-corrected moments."""

import numpy as np

from .. import kernels


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        adam_step(self.params, self.m, self.v, self.lr, self.t, self.beta1, self.beta2, self.eps)


def adam_step(params, m, v, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update at step ``t`` (1-based). Parameters without a
    gradient are left alone."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, mi, vi in zip(params, m, v):
        if p.grad is None:
            continue
        kernels.adam_update(p.data, p.grad, mi, vi, lr, beta1, beta2, eps, bc1, bc2)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    norm = sq**0.5
    if max_norm is not None and norm > max_norm:
        c = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= np.asarray(c, dtype=p.grad.dtype)
    return norm
