"""Central finite-difference gradient checker.

Used throughout the test suite to validate every hand-written backward
pass against a numerical derivative.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

__all__ = ["check_gradient"]


def check_gradient(f, point: NDArray[np.float64], h: float = 1e-5) -> float:
    """Max relative error between analytic and numerical gradients.

    Parameters
    ----------
    f : callable mapping an array to ``(value, gradient)`` where value is
        a scalar and gradient has the shape of the input
    point : evaluation point
    h : finite-difference step, > 0

    The numerical derivative per coordinate is the central difference
    ``(f(x + h*e) - f(x - h*e)) / (2h)``; the relative error is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` and the
    maximum over all coordinates is returned.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    point = np.asarray(point, dtype=np.float64)
    _, analytic = f(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ValueError("gradient shape does not match input shape")

    worst = 0.0
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        probe = point.copy()
        probe.reshape(-1)[i] = orig + h
        f_plus = f(probe)[0]
        probe.reshape(-1)[i] = orig - h
        f_minus = f(probe)[0]
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
