"""Central finite-difference check of hand-written gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |n|, floor): scale-aware, robust to near-zero entries."""
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), float(np.max(np.abs(analytic), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numeric_grad(loss: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Perturb ``x`` in place entry by entry; ``loss`` must read ``x``."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = loss()
        flat[i] = old - h
        fm = loss()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def grad_check(loss_and_grads: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
               arrays: Mapping[str, np.ndarray], h: float = 1e-5, tolerance: float = 1e-4) -> dict:
    """Compare analytic gradients against central differences.

    ``loss_and_grads()`` evaluates the scalar loss and returns analytic
    gradients keyed like ``arrays`` (parameters and/or inputs, float64).
    Returns ``{"errors": {name: rel err}, "max_error": float, "ok": bool}``.
    """
    for k, a in arrays.items():
        if a.dtype != np.float64:
            raise TypeError(f"gradient checking needs float64; {k} is {a.dtype}")
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    errors = {}
    for k, a in arrays.items():
        num = numeric_grad(lambda: float(loss_and_grads()[0]), a, h)
        errors[k] = relative_error(analytic[k], num)
    worst = max(errors.values(), default=0.0)
    return {"errors": errors, "max_error": worst, "ok": worst < tolerance}
