"""Fixed-step classical Runge-Kutta used by every ODE in the package."""

from __future__ import annotations

from typing import Callable

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when a fixed-step integration produces non-finite values."""

    def __init__(self, message: str, step: int, time: float):
        super().__init__(message)
        self.step = step
        self.time = time


def rk4(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: np.ndarray,
    grid: np.ndarray,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    bound: float | None = None,
    label: str = "ode",
) -> np.ndarray:
    """Integrate ``dy/ds = rhs(s, y)`` on ``grid`` and return every node.

    ``project`` is applied to each stage value and to each accepted step
    (used to keep Riccati iterates on the symmetric matrices). ``bound``
    turns entry magnitudes above it into an :class:`IntegrationError`.
    """
    grid = np.asarray(grid, dtype=float)
    out = np.empty((grid.size,) + np.shape(y0))
    y = np.array(y0, dtype=float)
    if project is not None:
        y = project(y)
    out[0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        _march(rhs, y, grid, out, project, bound, label)
    return out


def _march(rhs, y, grid, out, project, bound, label):
    # overflow shows up as a non-finite state and is reported below
    for k in range(grid.size - 1):
        s, h = grid[k], grid[k + 1] - grid[k]
        k1 = rhs(s, y)
        y2 = y + 0.5 * h * k1
        if project is not None:
            y2 = project(y2)
        k2 = rhs(s + 0.5 * h, y2)
        y3 = y + 0.5 * h * k2
        if project is not None:
            y3 = project(y3)
        k3 = rhs(s + 0.5 * h, y3)
        y4 = y + h * k3
        if project is not None:
            y4 = project(y4)
        k4 = rhs(s + h, y4)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if project is not None:
            y = project(y)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(
                f"{label}: non-finite state at step {k + 1} (s={grid[k + 1]:.6g})",
                step=k + 1,
                time=float(grid[k + 1]),
            )
        if bound is not None and np.max(np.abs(y)) > bound:
            raise IntegrationError(
                f"{label}: entries exceed {bound:g} at step {k + 1} (s={grid[k + 1]:.6g})",
                step=k + 1,
                time=float(grid[k + 1]),
            )
        out[k + 1] = y


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + np.swapaxes(M, -1, -2))
