"""Fixed-step classical Runge-Kutta integration on a half-step grid.

Right-hand sides are called with a half-step index ``j`` instead of a time,
so callers can precompute time-dependent coefficients on the grid
``t0 + j*h/2`` once and index into them.  Stage times of step ``k`` are
``2k``, ``2k+1`` (twice) and ``2k+2``.
"""
from __future__ import annotations

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when the state stops being finite."""

    def __init__(self, step: int, norm: float):
        super().__init__(f"non-finite state at step {step} (norm={norm})")
        self.step = step
        self.norm = norm


def step_grid(t0: float, t1: float, h: float) -> tuple[int, float]:
    """Number of equal steps covering [t0, t1] with step at most ``h``."""
    if h <= 0:
        raise ValueError("step must be positive")
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    n = int(np.ceil((t1 - t0) / h - 1e-9))
    n = max(n, 1)
    return n, (t1 - t0) / n


def rk4(rhs, x0, h: float, n_steps: int, record: bool = True, check_every: int = 100):
    """Integrate ``dx/dt = rhs(j, x)`` for ``n_steps`` steps of size ``h``.

    ``h`` may be negative to integrate backwards.  Returns the array of
    states of shape ``(n_steps + 1,) + x0.shape`` when ``record`` is true,
    otherwise only the final state.
    """
    x = np.array(x0, dtype=float)
    out = np.empty((n_steps + 1,) + x.shape) if record else None
    if record:
        out[0] = x
    half = 0.5 * h
    for k in range(n_steps):
        j = 2 * k
        k1 = rhs(j, x)
        k2 = rhs(j + 1, x + half * k1)
        k3 = rhs(j + 1, x + half * k2)
        k4 = rhs(j + 2, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        if check_every and (k + 1) % check_every == 0 and not np.all(np.isfinite(x)):
            raise IntegrationError(k + 1, float(np.linalg.norm(x)))
        if record:
            out[k + 1] = x
    if not np.all(np.isfinite(x)):
        raise IntegrationError(n_steps, float(np.linalg.norm(x)))
    return out if record else x


def simpson(values, h: float, axis: int = 0):
    """Composite Simpson rule for samples on a uniform grid.

    Falls back to a trapezoid on the last interval when the number of
    intervals is odd.
    """
    y = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    m = y.shape[0] - 1
    if m < 1:
        return np.zeros(y.shape[1:])
    if m == 1:
        return 0.5 * h * (y[0] + y[1])
    even = m - (m % 2)
    s = y[0] + y[even] + 4.0 * y[1:even:2].sum(axis=0) + 2.0 * y[2:even - 1:2].sum(axis=0)
    total = s * h / 3.0
    if even != m:
        total = total + 0.5 * h * (y[even] + y[m])
    return total


def trapezoid(values, h: float, axis: int = 0):
    y = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    if y.shape[0] < 2:
        return np.zeros(y.shape[1:])
    return h * (0.5 * (y[0] + y[-1]) + y[1:-1].sum(axis=0))
