"""Central finite-difference verification of analytic gradients.

The checker perturbs every element of every input at 64-bit precision and
compares the resulting numerical gradient with the one produced by the
reverse pass. It is the independent oracle for all differentiable ops.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def finite_difference_grad(f: Callable[..., Tensor], tensors: Sequence[Tensor],
                           index: int, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f(*tensors)`` w.r.t. one input."""
    t = tensors[index]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(*tensors).item()
        flat[i] = orig - h
        lo = f(*tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(f: Callable[..., Tensor], tensors: Sequence[Tensor],
                    rel_tol: float = 1e-3, h: float = 1e-3) -> float:
    """Assert analytic grads of scalar ``f`` match central differences.

    Inputs must be float64 leaves with requires_grad set. Returns the worst
    relative error over all inputs.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 inputs")
        t.grad = None
    out = f(*tensors)
    backward(out)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        num = finite_difference_grad(f, tensors, i, h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        err = np.abs(ana - num).max() / denom
        worst = max(worst, err)
        if err >= rel_tol:
            raise AssertionError(
                f"gradient mismatch on input {i}: rel error {err:.3e} >= {rel_tol:.1e}")
    return worst
