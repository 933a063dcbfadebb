"""Central finite-difference gradient checking.

Used by the test suite to confirm that every analytic gradient in the
package matches a numerical derivative, and handy when adding new ops.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def numerical_gradient(func: Callable[[], Tensor], value: np.ndarray,
                       step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar `func()` w.r.t. `value`.

    `func` must read `value` in place (it is perturbed entry by entry and
    restored), so pass the exact array the computation uses.
    """
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = float(func().data)
        flat[i] = original - step
        lower = float(func().data)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                       floor: float = 1e-8) -> float:
    """Largest |analytic - numeric| / max(|analytic|, |numeric|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(func: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-4, tolerance: float = 1e-4) -> float:
    """Compare backward() gradients of `func()` against finite differences.

    Returns the worst relative error over all parameters; raises
    AssertionError if it exceeds `tolerance`.
    """
    for p in params:
        p.grad = None
    loss = func()
    loss.backward()
    worst = 0.0
    for p in params:
        if p.grad is None:
            raise AssertionError("parameter received no gradient")
        numeric = numerical_gradient(func, p.data, step=step)
        worst = max(worst, max_relative_error(p.grad, numeric))
    if worst > tolerance:
        raise AssertionError(f"gradient mismatch: relative error {worst:.3e} "
                             f"> {tolerance:.1e}")
    return worst
