"""Central finite-difference gradient checks (64-bit only)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["max_rel_error", "check_gradients"]

FD_STEP = 1e-5


def max_rel_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn,
    tensors: list[Tensor],
    rng: np.random.Generator,
    n_coords: int = 20,
    h: float = FD_STEP,
) -> float:
    """Compare analytic grads of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the shared tensors on every call.
    Samples ``n_coords`` coordinates per tensor; returns the max guarded
    relative error over all sampled coordinates.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.copy() for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        n = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(loss_fn().data)
            flat[c] = orig - h
            dn = float(loss_fn().data)
            flat[c] = orig
            numeric = (up - dn) / (2 * h)
            worst = max(worst, max_rel_error(float(g.reshape(-1)[c]), numeric))
    return worst
