"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from .core import DiffTensor, backward

__all__ = ["grad_check"]


def grad_check(f, inputs: list[DiffTensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and numeric gradients of f.

    `f` must return a scalar DiffTensor and rebuild its graph on every call;
    `inputs` are differentiable leaves whose value buffers get perturbed in
    place, one coordinate at a time. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |numeric|).
    """
    for t in inputs:
        t.grad = None
    out = f(inputs)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else t.values * 0.0 for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        aflat = a.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = float(f(inputs).values.reshape(()))
            flat[j] = orig - eps
            lo = float(f(inputs).values.reshape(()))
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(aflat[j] - numeric) / max(1e-8, abs(numeric))
            if err > worst:
                worst = err
    return worst
