"""Adam with bias correction, plus the cosine-annealed learning rate."""
from __future__ import annotations

import math

import numpy as np

from .nn import Parameter, ParamSet

__all__ = ["AdamState", "adam_step", "cosine_lr"]


class AdamState:
    """Per-parameter first/second moments, step counter, schedule settings."""

    def __init__(self, base_lr: float, total_steps: int,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.base_lr = float(base_lr)
        self.total_steps = int(total_steps)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.total_steps, self.base_lr)

    def state_arrays(self, prefix: str = "opt.") -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.m.items():
            out[f"{prefix}m.{name}"] = m
        for name, v in self.v.items():
            out[f"{prefix}v.{name}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "opt.") -> None:
        for key, buf in arrays.items():
            if key.startswith(prefix + "m."):
                self.m[key[len(prefix) + 2:]] = np.array(buf, dtype=np.float64)
            elif key.startswith(prefix + "v."):
                self.v[key[len(prefix) + 2:]] = np.array(buf, dtype=np.float64)


def adam_step(params: ParamSet | list[Parameter], state: AdamState, lr: float | None = None) -> None:
    """One Adam update over every trainable parameter; clears gradients.

    Parameters without a gradient buffer are treated as having zero gradient,
    so their values stay put while the moment bookkeeping still advances.
    """
    state.step += 1
    if lr is None:
        lr = state.lr_at(state.step - 1)
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in params:
        if not p.trainable:
            p.tensor.grad = None
            continue
        g = p.tensor.grad
        if g is None:
            g = 0.0
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros(p.tensor.shape)
            v = np.zeros(p.tensor.shape)
        else:
            v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g if isinstance(g, np.ndarray) else 0.0)
        state.m[p.name] = m
        state.v[p.name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.tensor.values = p.tensor.values - lr * update
        p.tensor.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)), clamped at the end."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
