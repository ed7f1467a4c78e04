"""Linear recurrence h_t = a_t * h_{t-1} + b_t, sequential and parallel.

The time axis is ``-3`` (coefficients are (..., T, channels, state)) and
h_0 = 0 before the first step. The parallel form is a Blelloch work-efficient
exclusive scan over pairs (a, b) under

    (a1, b1) o (a2, b2) = (a1 * a2, a2 * b1 + b2)

whose identity is (1, 0). Lengths that are not a power of two are padded on
the right with identity elements, which leaves every real prefix unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, as_tensor

TIME_AXIS = -3


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"scan: decay {a.shape} and input {b.shape} shapes differ")
    if a.ndim < 3:
        raise ShapeError(f"scan: expected (..., T, channels, state) coefficients, got {a.shape}")
    if a.shape[TIME_AXIS] < 1:
        raise ShapeError("scan: need at least one time step")


def sequential_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check(a, b)
    a_t = np.moveaxis(a, TIME_AXIS, 0)
    b_t = np.moveaxis(b, TIME_AXIS, 0)
    h = np.empty_like(b_t)
    h[0] = b_t[0]
    for t in range(1, h.shape[0]):
        h[t] = a_t[t] * h[t - 1] + b_t[t]
    return np.moveaxis(h, 0, TIME_AXIS)


def parallel_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Blelloch up-sweep / down-sweep; O(T) work and O(log T) depth.

    Each level is one vectorised numpy operation over all pairs at that
    level, which is where the parallelism lives.
    """
    _check(a, b)
    a_t = np.moveaxis(a, TIME_AXIS, 0)
    b_t = np.moveaxis(b, TIME_AXIS, 0)
    T = a_t.shape[0]
    n = 1 << (T - 1).bit_length()
    A = np.ones((n,) + a_t.shape[1:], dtype=a.dtype)
    B = np.zeros((n,) + b_t.shape[1:], dtype=b.dtype)
    A[:T] = a_t
    B[:T] = b_t

    # up-sweep: node k accumulates the total of its subtree
    stride = 1
    while stride < n:
        right = np.arange(2 * stride - 1, n, 2 * stride)
        left = right - stride
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[left] * A[right]
        stride *= 2

    # down-sweep: turn subtree totals into exclusive prefixes
    A[n - 1] = 1.0
    B[n - 1] = 0.0
    stride = n // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, n, 2 * stride)
        left = right - stride
        pa, pb = A[right], B[right]
        la, lb = A[left], B[left]
        A[left], B[left] = pa, pb
        A[right] = pa * la
        B[right] = la * pb + lb
        stride //= 2

    # inclusive prefix = exclusive prefix o own element; only b survives with h_0 = 0
    h = a_t * B[:T] + b_t
    return np.moveaxis(h, 0, TIME_AXIS)


_KERNELS = {"sequential": sequential_scan, "parallel": parallel_scan}


def linear_recurrence(a, b, method: str = "parallel") -> Tensor:
    """Differentiable scan. Backward runs the adjoint recurrence in reverse time:

    g_b[t] = dL/dh[t] + a[t+1] * g_b[t+1],   g_a[t] = g_b[t] * h[t-1]
    """
    kernel = _KERNELS[method]
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    h = kernel(ad, bd)

    def backward(g):
        T = ad.shape[TIME_AXIS]
        a_next = np.ones_like(ad)
        if T > 1:
            a_next[..., : T - 1, :, :] = ad[..., 1:, :, :]
        a_next[..., T - 1, :, :] = 0.0
        lam = np.flip(kernel(np.flip(a_next, TIME_AXIS), np.flip(g, TIME_AXIS)), TIME_AXIS)
        h_prev = np.zeros_like(h)
        if T > 1:
            h_prev[..., 1:, :, :] = h[..., : T - 1, :, :]
        return lam * h_prev, lam

    return Tensor._result(h, (a, b), backward, f"scan_{method}")


@dataclass
class ScanCoeffs:
    """Per-step decay ``a`` and input injection ``b``, each (..., T, channels, state)."""

    a: Tensor
    b: Tensor


def scan_sequential(coeffs: ScanCoeffs) -> Tensor:
    return linear_recurrence(coeffs.a, coeffs.b, method="sequential")


def scan_parallel(coeffs: ScanCoeffs) -> Tensor:
    return linear_recurrence(coeffs.a, coeffs.b, method="parallel")
