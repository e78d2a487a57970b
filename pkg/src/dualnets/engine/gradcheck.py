"""Central finite-difference gradient oracle.

The oracle only evaluates loss values, never analytic gradients, so it stays
independent of the backward implementations it is used to check.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE


def numerical_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to array ``x``.

    ``f`` takes no arguments and reads ``x`` by reference; entries of ``x``
    are perturbed in place and restored.
    """
    x = np.asarray(x)
    grad = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case relative error with a unit absolute floor.

    ``|a - n| / max(1, |a|, |n|)`` per entry; the floor keeps finite-difference
    noise on near-zero gradients from being amplified.
    """
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def nudge_from_kinks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push entries away from zero so relu/max kinks cannot straddle the FD step."""
    x = np.asarray(x, dtype=DTYPE)
    small = np.abs(x) < margin
    return x + small * np.where(x >= 0, margin, -margin)
