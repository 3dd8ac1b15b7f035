"""Central finite-difference gradient checks against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int,
                       eps: float = 1e-5) -> np.ndarray:
    x = inputs[index]
    x.data = np.ascontiguousarray(x.data)
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*inputs).item()
            flat[i] = orig - eps
            down = fn(*inputs).item()
            flat[i] = orig
            grad.reshape(-1)[i] = (up - down) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |a|, max |n|, floor)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_error(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error over every requires_grad input of ``fn(*inputs)``."""
    for x in inputs:
        x.grad = None
    fn(*inputs).backward()
    worst = 0.0
    for i, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(fn, inputs, i, eps)))
    return worst


def parameter_gradient_error(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                             eps: float = 1e-5, max_entries: int | None = None,
                             rng: np.random.Generator | None = None) -> float:
    """Relative error over the concatenated parameter vector.

    Scaling jointly keeps parameters whose exact gradient is zero (e.g. key
    biases under softmax shift invariance) from dividing roundoff by roundoff.
    ``max_entries`` checks a random subset of coordinates per parameter.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic_all, numeric_all = [], []
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                num[j] = (up - down) / (2.0 * eps)
        analytic_all.append(analytic.reshape(-1)[idx])
        numeric_all.append(num)
    if not analytic_all:
        return 0.0
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all))
