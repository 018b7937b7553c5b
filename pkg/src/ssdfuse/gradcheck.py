"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


def grad_check(f, point: np.ndarray, step: float = 1e-5) -> float:
    """Compare an analytic gradient against central differences.

    ``f(point)`` must return ``(value, grad)`` where value is a scalar and
    grad has point's shape. Every element of ``point`` is perturbed by
    ``+-step``; the result is the max over elements of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    point = np.asarray(point, dtype=np.float64)
    _, grad = f(point)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise ValueError(f"gradient shape {grad.shape} != point shape {point.shape}")
    worst = 0.0
    flat = point.ravel()
    for idx in range(flat.size):
        orig = flat[idx]
        bumped = point.copy().ravel()
        bumped[idx] = orig + step
        up, _ = f(bumped.reshape(point.shape))
        bumped[idx] = orig - step
        down, _ = f(bumped.reshape(point.shape))
        numeric = (up - down) / (2.0 * step)
        analytic = grad.ravel()[idx]
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst
