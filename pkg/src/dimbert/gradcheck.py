"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from . import tensor as T


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``indices`` restricts the check to a subset of flat indices; other entries
    are left at zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size) if indices is None else indices:
        orig = flat_x[i]
        flat_x[i] = orig + step
        hi = f()
        flat_x[i] = orig - step
        lo = f()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||)``; 0 when both are below ``floor``."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < floor:
        return float(diff)
    return float(diff / scale)


def check_gradients(loss_fn: Callable[[], T.Tensor], params: Iterable[tuple[str, T.Tensor]],
                    step: float = 1e-5, max_entries: int | None = None, rng=None) -> dict[str, float]:
    """Relative error between backprop and central differences for each named parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values.
    """
    params = list(params)
    T.zero_grad(p for _, p in params)
    T.backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params}
    T.zero_grad(p for _, p in params)
    rng = np.random.default_rng(0) if rng is None else rng

    def f():
        return float(loss_fn().data)

    errors = {}
    for name, p in params:
        idx = None
        if max_entries is not None and p.data.size > max_entries:
            idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        numeric = numerical_gradient(f, p.data, step, idx)
        a = analytic[name]
        if idx is not None:
            a = a.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        errors[name] = relative_error(a, numeric)
    return errors
