"""Adam optimizer and the warmup + staircase-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class LrSchedule:
    """Linear warmup from 0 to ``peak_lr``, then staircase decay.

    The decay multiplies by ``decay_rate`` once per full ``decay_interval``
    after the warmup span: lr(step) = peak * rate ** floor((step - warmup) / interval).
    """

    peak_lr: float = 3e-4
    warmup_steps: int = 100
    decay_interval: int = 500
    decay_rate: float = 0.95

    def at(self, step):
        return lr_at_step(step, self)


def lr_at_step(step, schedule):
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    s = schedule
    if s.warmup_steps > 0 and step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if s.decay_interval <= 0:
        return s.peak_lr
    k = (step - s.warmup_steps) // s.decay_interval
    return s.peak_lr * s.decay_rate**k


class Adam:
    """Standard Adam with bias correction over a name -> Tensor parameter dict."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None):
        if lr is None:
            lr = self.lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
