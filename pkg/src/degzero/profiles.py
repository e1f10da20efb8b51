"""Smooth cutoff profiles shared by the escape and quantization code."""

from __future__ import annotations

import numpy as np

__all__ = ["smooth_step", "smooth_step_deriv", "cutoff_chi", "SMOOTH_STEP_MAX_SLOPE"]

#: sup of smooth_step'; attained at u = 1/2
SMOOTH_STEP_MAX_SLOPE = 2.0


def _f(u):
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(u > 0, np.exp(-1.0 / np.where(u > 0, u, 1.0)), 0.0)


def smooth_step(u):
    """C-infinity step: 0 for u <= 0, 1 for u >= 1, f(u) / (f(u) + f(1 - u))."""
    u = np.asarray(u, float)
    a, b = _f(u), _f(1.0 - u)
    return a / (a + b)


def smooth_step_deriv(u):
    """Derivative of :func:`smooth_step`."""
    u = np.asarray(u, float)
    a, b = _f(u), _f(1.0 - u)
    with np.errstate(divide="ignore", invalid="ignore"):
        da = np.where(u > 0, a / np.where(u > 0, u, 1.0) ** 2, 0.0)
        db = np.where(u < 1, b / np.where(u < 1, 1.0 - u, 1.0) ** 2, 0.0)
        out = (da * b + a * db) / (a + b) ** 2
    return np.where((u <= 0) | (u >= 1), 0.0, out)


def cutoff_chi(s):
    """Cutoff with chi = 0 on [0, 1/2] and chi = 1 on [1, inf)."""
    return smooth_step(2.0 * np.asarray(s, float) - 1.0)
