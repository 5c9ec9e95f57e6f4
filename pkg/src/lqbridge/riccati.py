"""Backward Riccati solves, the Hamiltonian cross-check and the closed-loop pair."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rk4 import IntegrationError, rk4, sym
from .ltv_system import LtvSystem, MatrixTrajectory, transition_and_gramian

ESCAPE_BOUND = 1e12
CONJUGATE_COND = 1e12
GAMMA_TOL = 1e-12


class FiniteEscapeError(IntegrationError):
    """The Riccati solution left every bounded set before reaching ``t0``."""


class ConjugatePointError(np.linalg.LinAlgError):
    """``Psi11 + Psi12 K1`` is too ill-conditioned to invert."""


class ControllabilityLossError(np.linalg.LinAlgError):
    """The closed-loop Gramian came out numerically singular."""


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Tabulated ``Pi(tau, K1, t)`` on an increasing grid ending at ``t``.

    ``values[k]`` pairs with ``grid[k]``; ``values[-1]`` is ``K1`` exactly.
    Between nodes the solution is reconstructed by cubic Hermite
    interpolation using the Riccati right-hand side as the derivative, which
    keeps fourth-order accuracy.
    """

    sys: LtvSystem = field(repr=False)
    t: float
    K1: np.ndarray
    grid: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    psd_ok: bool = True
    min_eig: float = 0.0

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    def derivative(self, tau: float, K: np.ndarray) -> np.ndarray:
        """``dPi/dtau`` at ``(tau, K)``."""
        return -_sigma_rhs(self.sys, tau, K)

    def __call__(self, tau: float) -> np.ndarray:
        g = self.grid
        if tau < g[0] - 1e-12 * max(1.0, abs(g[0])) or tau > g[-1] + 1e-12 * max(1.0, abs(g[-1])):
            raise ValueError(f"tau={tau} outside the solved interval [{g[0]}, {g[-1]}]")
        j = int(np.clip(np.searchsorted(g, tau, side="right") - 1, 0, g.size - 2))
        h = g[j + 1] - g[j]
        s = (tau - g[j]) / h
        if abs(s) < 1e-9:
            return self.values[j].copy()
        if abs(s - 1.0) < 1e-9:
            return self.values[j + 1].copy()
        y0, y1 = self.values[j], self.values[j + 1]
        d0, d1 = self.derivative(g[j], y0), self.derivative(g[j + 1], y1)
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return sym(h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1)

    def to_csv(self, path) -> Path:
        """Write ``tau`` and the row-major entries of ``Pi`` to ``path``."""
        path = Path(path)
        n = self.K1.shape[0]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau"] + [f"Pi_{i}{j}" for i in range(n) for j in range(n)])
            for tau, P in zip(self.grid, self.values):
                w.writerow([f"{tau:.16e}"] + [f"{v:.16e}" for v in P.ravel()])
        return path


def _sigma_rhs(sys: LtvSystem, tau: float, K: np.ndarray) -> np.ndarray:
    # dK/dsigma with sigma = t - tau
    A = sys.A(tau)
    return A.T @ K + K @ A - K @ sys.noise(tau) @ K + sys.Q(tau)


def solve_riccati(
    sys: LtvSystem,
    K1=None,
    t: float | None = None,
    steps: int | None = None,
    t0: float | None = None,
    bound: float = ESCAPE_BOUND,
) -> RiccatiSolution:
    """Integrate the Riccati equation backward from ``Pi(t) = K1`` to ``t0``.

    The march runs forward in ``sigma = t - tau`` with symmetrization after
    every RK4 stage. Entries above ``bound`` raise :class:`FiniteEscapeError`
    carrying the blow-up time ``tau``.
    """
    t = sys.t1 if t is None else float(t)
    t0 = sys.t0 if t0 is None else float(t0)
    if not t0 < t:
        raise ValueError("solve_riccati needs t0 < t")
    n = sys.n
    K1 = np.zeros((n, n)) if K1 is None else np.asarray(K1, dtype=float)
    if K1.shape != (n, n):
        raise ValueError(f"K1 must be {n}x{n}")
    if np.max(np.abs(K1 - K1.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(K1), initial=0.0)):
        raise ValueError("K1 must be symmetric")
    K1 = sym(K1)
    steps = sys.steps_for(t0, t) if steps is None else int(steps)
    sigma = np.linspace(0.0, t - t0, steps + 1)
    try:
        out = rk4(
            lambda s, K: _sigma_rhs(sys, t - s, K),
            K1,
            sigma,
            project=sym,
            bound=bound,
            label="riccati",
        )
    except IntegrationError as exc:
        tau = t - exc.time
        raise FiniteEscapeError(f"Riccati solution escapes near tau={tau:.6g}", exc.step, tau) from exc
    values = out[::-1].copy()
    values[-1] = K1
    grid = t - sigma[::-1]
    grid[0], grid[-1] = t0, t
    eigs = np.linalg.eigvalsh(values)
    scale = max(1.0, float(np.max(np.abs(eigs))))
    min_eig = float(eigs[:, 0].min())
    return RiccatiSolution(sys, t, K1, grid, values, psd_ok=min_eig >= -1e-9 * scale, min_eig=min_eig)


@dataclass(frozen=True)
class HamiltonianTransition:
    """Blocks of the backward transition ``Psi(tau, t)`` of the Hamiltonian flow."""

    Psi: np.ndarray

    @property
    def n(self) -> int:
        return self.Psi.shape[0] // 2

    @property
    def blocks(self):
        n = self.n
        P = self.Psi
        return P[:n, :n], P[:n, n:], P[n:, :n], P[n:, n:]

    def symplectic_defect(self) -> float:
        """``max |Psi' J Psi - J|``."""
        n = self.n
        J = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
        return float(np.max(np.abs(self.Psi.T @ J @ self.Psi - J)))


def hamiltonian_matrix(sys: LtvSystem, tau: float) -> np.ndarray:
    A = sys.A(tau)
    return np.block([[A, -sys.noise(tau)], [-sys.Q(tau), -A.T]])


def hamiltonian_transition(sys: LtvSystem, t: float, tau: float, steps: int | None = None) -> HamiltonianTransition:
    """Map from the state at ``t`` back to the state at ``tau <= t``."""
    if tau > t:
        raise ValueError("hamiltonian_transition expects tau <= t")
    n2 = 2 * sys.n
    if tau == t:
        return HamiltonianTransition(np.eye(n2))
    steps = sys.steps_for(tau, t) if steps is None else int(steps)
    sigma = np.linspace(0.0, t - tau, steps + 1)
    out = rk4(lambda s, Y: -hamiltonian_matrix(sys, t - s) @ Y, np.eye(n2), sigma, label="hamiltonian")
    return HamiltonianTransition(out[-1])


def riccati_via_hamiltonian(
    sys: LtvSystem, K1=None, t: float | None = None, tau: float | None = None, steps: int | None = None
) -> np.ndarray:
    """``Pi(tau, K1, t)`` from the linear-fractional map of the Hamiltonian flow.

    Raises :class:`ConjugatePointError` when ``Psi11 + Psi12 K1`` has
    condition number above 1e12.
    """
    t = sys.t1 if t is None else float(t)
    tau = sys.t0 if tau is None else float(tau)
    n = sys.n
    K1 = np.zeros((n, n)) if K1 is None else sym(np.asarray(K1, dtype=float))
    P11, P12, P21, P22 = hamiltonian_transition(sys, t, tau, steps).blocks
    X = P11 + P12 @ K1
    Y = P21 + P22 @ K1
    cond = np.linalg.cond(X)
    if not np.isfinite(cond) or cond > CONJUGATE_COND:
        raise ConjugatePointError(f"near conjugate point at tau={tau:g}: cond={cond:.3g}")
    return sym(np.linalg.solve(X.T, Y.T).T)


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    """Feedback-shifted drift ``Ahat = A - Bhat Bhat' Pi(., 0, t)`` and its transfer data."""

    sys: LtvSystem = field(repr=False)
    t0: float
    t: float
    riccati: RiccatiSolution = field(repr=False)
    Ahat: MatrixTrajectory = field(repr=False)
    Phi_hat: np.ndarray
    Gamma_hat: np.ndarray
    steps: int

    @property
    def Pi0(self) -> np.ndarray:
        """``Pi(t0, 0, t)``."""
        return self.riccati.values[0]


def closed_loop(sys: LtvSystem, t: float | None = None, t0: float | None = None, steps: int | None = None) -> ClosedLoopSystem:
    """Assemble ``(Ahat, Phi_hat, Gamma_hat)`` on ``[t0, t]``.

    The Riccati solve uses twice the forward step count so that every RK4
    stage of the forward pass lands on a stored node.
    """
    t = sys.t1 if t is None else float(t)
    t0 = sys.t0 if t0 is None else float(t0)
    N = sys.steps_for(t0, t) if steps is None else int(steps)
    ric = solve_riccati(sys, None, t, steps=2 * N, t0=t0)

    def Ahat(tau, _r=ric):
        return sys.A(tau) - sys.noise(tau) @ _r(tau)

    traj = MatrixTrajectory.from_function(Ahat, (sys.n, sys.n), name="closed_loop")
    Phi, Gam = transition_and_gramian(traj, sys.noise, t0, t, N)
    ev = np.linalg.eigvalsh(Gam)
    if not ev[0] > GAMMA_TOL * max(ev[-1], np.finfo(float).tiny):
        raise ControllabilityLossError(
            f"closed-loop Gramian on [{t0:g}, {t:g}] is numerically singular (min eig {ev[0]:.3g})"
        )
    return ClosedLoopSystem(sys, t0, t, ric, traj, Phi, Gam, N)


def scalar_riccati_reference(a: float, b: float, q: float, k1: float, sigma: float) -> float:
    """Closed form of ``dk/dsigma = 2 a k - b^2 k^2 + q`` for ``b != 0``, ``q >= 0``."""
    # roots of -b^2 k^2 + 2 a k + q
    disc = math.sqrt(a * a + b * b * q)
    kp, km = (a + disc) / b**2, (a - disc) / b**2
    if k1 == kp:
        return kp
    r = (k1 - km) / (k1 - kp)
    e = r * math.exp(2 * disc * sigma)
    return (kp * e - km) / (e - 1.0)


def distance_via_terminal_weight(sys: LtvSystem, K1, x, y, t: float | None = None, t0: float | None = None) -> float:
    """Half squared distance recomputed through a terminal weight ``K1``.

    Test utility: the result must not depend on ``K1``. It uses the feedback
    drift ``A - Bhat Bhat' Pi(., K1, t)``, its Gramian, and the boundary
    terms ``x' Pi(t0, K1, t) x / 2 - y' K1 y / 2``.
    """
    t = sys.t1 if t is None else float(t)
    t0 = sys.t0 if t0 is None else float(t0)
    K1 = np.asarray(K1, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    N = sys.steps_for(t0, t)
    ric = solve_riccati(sys, K1, t, steps=2 * N, t0=t0)
    traj = MatrixTrajectory.from_function(lambda s: sys.A(s) - sys.noise(s) @ ric(s), (sys.n, sys.n))
    Phi, Gam = transition_and_gramian(traj, sys.noise, t0, t, N)
    r = Phi @ x - y
    return float(0.5 * r @ np.linalg.solve(Gam, r) + 0.5 * x @ ric.values[0] @ x - 0.5 * y @ K1 @ y)
