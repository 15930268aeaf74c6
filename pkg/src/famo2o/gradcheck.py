"""Central finite-difference checks for the hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

FD_STEP = 1e-5
REL_FLOOR = 1e-6


def numeric_grad(loss_fn: Callable[[], float], params: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to ``params`` (perturbed in place).

    ``params`` must be contiguous so that its flat view aliases the array the
    loss reads; the result has the shape of ``params``.
    """
    shape = params.shape
    flat = params.reshape(-1)
    if not np.shares_memory(flat, params):
        raise ValueError("numeric_grad needs a contiguous parameter array")
    grad = np.empty(params.size)
    params = flat
    for i in range(flat.size):
        orig = params[i]
        params[i] = orig + h
        up = loss_fn()
        params[i] = orig - h
        down = loss_fn()
        params[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
