"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward

# denominator floor: entries below it are compared absolutely, above central-difference round-off (~1e-10)
REL_FLOOR = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_FLOOR) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / den).max())


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6,
                 indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param.data`` (optionally only at ``indices``)."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn().item()
        flat[i] = old - eps
        down = loss_fn().item()
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-6,
                    floor: float = REL_FLOOR, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between autodiff and central differences for each parameter.

    ``max_entries`` limits the finite-difference probes per parameter to a
    random subset (drawn from ``rng``); autodiff values are compared on the
    same entries.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    errors = {}
    for k, p in params.items():
        idx = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        num = numeric_grad(loss_fn, p, eps, idx)
        a = analytic[k].reshape(-1)
        n = num.reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        errors[k] = relative_error(a, n, floor)
    return errors
