"""Central finite-difference gradient checking in 64-bit."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d sum(fn() * w) / dx by central differences, where w is fixed by the caller via fn."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data.sum())
        flat[i] = orig - eps
        fm = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - b| / max(|a|, |b|, floor * max(1, max|b|)) elementwise.

    The floor keeps entries that are tiny relative to the rest of the
    gradient from turning finite-difference rounding noise (~1e-10) into
    large relative errors.
    """
    if not a.size:
        return 0.0
    scale = floor * max(1.0, float(np.max(np.abs(b))))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), scale)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic and numeric gradients of a random projection of ``fn(*inputs)``.

    Inputs must be float64 tensors with ``requires_grad``. Returns the worst
    relative error over all inputs.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks require float64 inputs")
    out = fn(*inputs)
    proj = np.random.default_rng(seed).normal(size=out.shape)

    def scalar():
        return fn(*inputs) * Tensor(proj, dtype=np.float64)

    for t in inputs:
        t.grad = None
    (out * Tensor(proj, dtype=np.float64)).sum().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(scalar, t, eps)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
