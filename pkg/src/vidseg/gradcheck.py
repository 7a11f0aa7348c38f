"""Central finite-difference oracle for every gradient claim in the package."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import AutodiffError, Tensor

__all__ = ["finite_difference_check", "NondeterministicFunctionError"]


class NondeterministicFunctionError(AutodiffError):
    """The function under test returned different values on identical inputs."""


def finite_difference_check(
    fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5
) -> float:
    """Compare analytic gradients of a scalar-valued fn against central differences.

    Returns max over coordinates of |analytic - central| / max(1, |analytic|).
    Raises NondeterministicFunctionError if two forward passes disagree bitwise.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(point.data, dtype=np.float64, copy=True)

    first = fn(Tensor(base.copy())).data
    second = fn(Tensor(base.copy())).data
    if first.shape != second.shape or not np.array_equal(first, second):
        raise NondeterministicFunctionError(
            "fn returned different outputs for identical inputs"
        )

    x = Tensor(base.copy(), requires_grad=True)
    out = fn(x)
    if out.ndim != 0:
        raise AutodiffError(f"gradcheck: fn must return a scalar, got {out.shape}")
    out.backward()
    analytic = (
        np.zeros_like(base) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    )

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = fn(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
