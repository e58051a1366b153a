from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .array import NdArray, backward


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6,
                   indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """``|a - b| / max(|a|, |b|, floor)``.

    A positive ``floor`` keeps gradients that vanish identically (a bias
    feeding straight into batch norm, say) from turning round-off into a
    relative error of one.
    """
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn: Callable[[], NdArray], leaves: Sequence[NdArray], h: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0, floor: float = 0.0) -> list[float]:
    """Compare backward gradients of ``loss_fn()`` against central differences.

    Returns one relative error per leaf. ``max_entries`` samples that many
    coordinates per leaf instead of all of them.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = loss_fn()
    analytic = backward(loss, leaves)
    analytic = [a.copy() for a in analytic]
    rng = np.random.default_rng(seed)
    errors = []
    for leaf, a in zip(leaves, analytic):
        idx = None
        if max_entries is not None and leaf.size > max_entries:
            idx = rng.choice(leaf.size, size=max_entries, replace=False)
        num = numerical_grad(lambda: float(loss_fn().data), leaf.data, h, idx)
        if idx is not None:
            errors.append(relative_error(a.reshape(-1)[idx], num.reshape(-1)[idx], floor))
        else:
            errors.append(relative_error(a, num, floor))
    return errors
