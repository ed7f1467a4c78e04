"""Central finite-difference gradient checks (run these in reference mode)."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-5,
                   indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``array`` (perturbed in place).

    Only ``indices`` (flat positions) are probed when given; the rest stay zero.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor)."""
    diff = np.linalg.norm((analytic - numeric).ravel())
    scale = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), floor)
    return float(diff / scale)


def check_params(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                 max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error between backprop and finite differences for each named tensor.

    With ``max_entries`` set, that many randomly chosen entries per tensor are
    probed and compared (the others are ignored).
    """
    for t in params.values():
        t.grad = None
    loss_fn().backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for name, t in params.items()}

    def f() -> float:
        return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in params.items():
        idx = None
        if max_entries is not None and t.size > max_entries:
            idx = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_grad(f, t.data, h, idx)
        a = analytic[name]
        if idx is not None:
            a, numeric = a.reshape(-1)[idx], numeric.reshape(-1)[idx]
        errors[name] = relative_error(a, numeric)
    for t in params.values():
        t.grad = None
    return errors


def directional_probe(f: Callable[[np.ndarray], float], grad: np.ndarray, x: np.ndarray,
                      direction: np.ndarray, h: float = 1e-5) -> tuple[float, float]:
    """(analytic, numeric) directional derivative of ``f`` at ``x`` along ``direction``."""
    analytic = float(np.sum(grad * direction))
    numeric = (f(x + h * direction) - f(x - h * direction)) / (2 * h)
    return analytic, float(numeric)
