"""Central finite-difference checks for the autodiff engine (64-bit only)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude.

    Scaling by the tensor-wide magnitude keeps entries that cancel to ~0
    (batch-norm input gradients, for instance) from dominating.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5
) -> float:
    """Worst relative error between backprop and finite differences over ``params``."""
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradient checks are defined for 64-bit tensors only")
        p.zero_grad()
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, p, step)))
    return worst
