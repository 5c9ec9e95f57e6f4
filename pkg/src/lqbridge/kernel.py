"""Distance form, trace rate, prefactor and evaluation of the killed-diffusion kernel.

The kernel has the structure

    kappa(t0, x, t, y) = c(t) * exp(-0.5 * [x; y]' M [x; y]),

with ``M`` the 2n x 2n distance form of the feedback-shifted minimum-energy
problem and ``c`` a spatially constant normalizer. ``c`` obeys
``dc/dt = -theta(t) c`` and is pinned by the delta initial condition, which
is imposed at small offsets ``delta`` and extrapolated to ``delta -> 0``.

Everything that depends on ``t`` is produced by one forward sweep in
logarithmic time (see :class:`KernelFamily`). The sweep carries

* ``P = Gamma_hat(s, t0)``:  ``P' = A P + P A' + 2 B B' - P Q P``, ``P(t0) = 0``
* ``G = Phi_hat(s, t0)``:     ``G' = (A - P Q) G``, ``G(t0) = I``
* ``Pi0 = Pi(t0, 0, s)``:     ``Pi0' = G' Q G``
* ``I = int theta``          with ``theta = tr(A + B B' P^-1)``

so a single pass yields ``M(s, t0)`` and ``c(s)`` for every ``s``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._rk4 import rk4, sym
from .ltv_system import LtvSystem, transition_and_gramian

LOG_2PI = math.log(2.0 * math.pi)
COND_LIMIT = 1e12
DEFAULT_PER_OCTAVE = 64
DEFAULT_DELTA_FRACTION = 1e-2
DEFAULT_HALVINGS = 4


class DegenerateHorizonError(np.linalg.LinAlgError):
    """``Gamma_hat`` is numerically singular (``t`` too close to ``t0``)."""


class DegenerateTimeError(ValueError):
    """A quantity that diverges at ``t0`` was requested there."""


class LimitNonconvergenceError(RuntimeError):
    """The small-offset extrapolation of the normalizer did not settle."""


class DomainError(ValueError):
    """An argument lies outside the domain of a closed-form expression."""


# --- distance form ----------------------------------------------------------


def _spd_inverse(S: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Inverse and log-determinant of an SPD matrix via Cholesky."""
    S = sym(S)
    ev = np.linalg.eigvalsh(S)
    if not ev[0] > 0 or ev[-1] / ev[0] > COND_LIMIT:
        raise DegenerateHorizonError(f"{what} is numerically singular (eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})")
    cf = cho_factor(S, lower=True)
    inv = cho_solve(cf, np.eye(S.shape[0]))
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return sym(inv), logdet


@dataclass(frozen=True, eq=False)
class DistanceForm:
    """Blocks of ``M(t, t0)``; ``0.5 [x; y]' M [x; y]`` is the optimal cost of moving x to y."""

    t0: float
    t: float
    M11: np.ndarray
    M12: np.ndarray
    M22: np.ndarray
    Pi0: np.ndarray = field(repr=False)
    Phi_hat: np.ndarray = field(repr=False)
    Gamma_hat: np.ndarray = field(repr=False)
    logdet_Gamma_hat: float = field(repr=False)
    rank: int = 0
    pd: bool = False
    source: str = ""

    @property
    def n(self) -> int:
        return self.M11.shape[0]

    @property
    def M21(self) -> np.ndarray:
        return self.M12.T

    @property
    def M(self) -> np.ndarray:
        return np.block([[self.M11, self.M12], [self.M21, self.M22]])

    def symmetry_report(self) -> dict:
        """How far the form is from being invariant under swapping x and y."""
        return {
            "blocks_equal": float(np.max(np.abs(self.M11 - self.M22))),
            "cross_symmetric": float(np.max(np.abs(self.M12 - self.M12.T))),
        }


def assemble_distance_form(t0, t, Phi_hat, Gamma_hat, Pi0, source="") -> DistanceForm:
    """``M11 = Phi' G^-1 Phi + Pi0``, ``M12 = -Phi' G^-1``, ``M22 = G^-1`` with ``G = Gamma_hat``."""
    Ginv, logdet = _spd_inverse(Gamma_hat, f"closed-loop Gramian on [{t0:g}, {t:g}]")
    M11 = sym(Phi_hat.T @ Ginv @ Phi_hat + Pi0)
    M12 = -Phi_hat.T @ Ginv
    full = np.block([[M11, M12], [M12.T, Ginv]])
    ev = np.linalg.eigvalsh(sym(full))
    tol = 1e-9 * max(1.0, abs(ev[-1]))
    rank = int(np.sum(ev > tol))
    return DistanceForm(
        float(t0), float(t), M11, M12, Ginv, sym(Pi0), Phi_hat, sym(Gamma_hat), logdet,
        rank=rank, pd=rank == full.shape[0], source=source,
    )


def distance_form(cl) -> DistanceForm:
    """Distance form from a :class:`~lqbridge.riccati.ClosedLoopSystem`."""
    return assemble_distance_form(cl.t0, cl.t, cl.Phi_hat, cl.Gamma_hat, cl.Pi0, source="riccati")


def squared_distance(M: DistanceForm, x, y) -> np.ndarray | float:
    """``0.5 [x; y]' M [x; y]``; broadcasts over leading axes of ``x`` and ``y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1:] != (M.n,) and not (M.n == 1 and x.ndim == 0):
        raise ValueError(f"x must have trailing dimension {M.n}")
    x = x[..., None] if M.n == 1 and (x.ndim == 0 or x.shape[-1] != 1) else x
    y = y[..., None] if M.n == 1 and (y.ndim == 0 or y.shape[-1] != 1) else y
    q = (
        np.einsum("...i,ij,...j->...", x, M.M11, x)
        + 2.0 * np.einsum("...i,ij,...j->...", x, M.M12, y)
        + np.einsum("...i,ij,...j->...", y, M.M22, y)
    )
    q = 0.5 * np.maximum(q, 0.0)
    return float(q) if q.ndim == 0 else q


# --- forward family in log time ---------------------------------------------


def _pack(P, G, Pi0, I):
    return np.concatenate([P.ravel(), G.ravel(), Pi0.ravel(), [I]])


def _unpack(y, n):
    k = n * n
    return y[:k].reshape(n, n), y[k : 2 * k].reshape(n, n), y[2 * k : 3 * k].reshape(n, n), y[3 * k]


def _family_rhs(sys: LtvSystem, t0: float, n: int, with_theta: bool):
    def f(s, y):
        P, G, Pi0, _ = _unpack(y, n)
        A, Bt, Q = sys.A(s), sys.B(s), sys.Q(s)
        BB = Bt @ Bt.T
        dP = A @ P + P @ A.T + 2.0 * BB - P @ Q @ P
        dG = (A - P @ Q) @ G
        dPi = G.T @ Q @ G
        dI = 0.0
        if with_theta:
            dI = float(np.trace(A)) + float(np.trace(Bt.T @ np.linalg.solve(P, Bt)))
        return _pack(sym(dP), dG, sym(dPi), dI)

    return f


def _symmetrize_state(n):
    k = n * n

    def proj(y):
        y = y.copy()
        P = y[:k].reshape(n, n)
        y[:k] = (0.5 * (P + P.T)).ravel()
        Pi = y[2 * k : 3 * k].reshape(n, n)
        y[2 * k : 3 * k] = (0.5 * (Pi + Pi.T)).ravel()
        return y

    return proj


@dataclass(frozen=True, eq=False)
class KernelFamily:
    """Kernel data for all ``t`` in ``(t0, t_max]`` from one log-time sweep.

    Nodes sit at ``v_k = log(delta_min) + k log(2) / per_octave`` plus a final
    node at ``log(t_max - t0)``; the delta offsets used for the normalizer
    are nodes. ``I`` at a node is ``int_{t0 + delta_min}^{s} theta``.
    """

    sys: LtvSystem = field(repr=False)
    t0: float
    t_max: float
    per_octave: int
    deltas: np.ndarray
    v: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.sys.n

    def _rhs_v(self):
        f = _family_rhs(self.sys, self.t0, self.n, True)
        t0 = self.t0

        def g(v, y):
            e = math.exp(v)
            return e * f(t0 + e, y)

        return g

    def state_at(self, t: float):
        """``(P, G, Pi0, I)`` at time ``t``; off-node times take one partial RK4 step."""
        if t <= self.t0:
            raise DegenerateTimeError("kernel data are singular at t = t0")
        v = math.log(t - self.t0)
        if v > self.v[-1] + 1e-12 or v < self.v[0] - 1e-12:
            raise ValueError(f"t={t} outside the swept range ({self.t0 + math.exp(self.v[0])}, {self.t_max}]")
        j = int(np.searchsorted(self.v, v, side="right") - 1)
        j = min(max(j, 0), self.v.size - 1)
        if abs(v - self.v[j]) <= 1e-13 * max(1.0, abs(v)):
            y = self.states[j]
        elif j + 1 < self.v.size and abs(v - self.v[j + 1]) <= 1e-13 * max(1.0, abs(v)):
            y = self.states[j + 1]
        else:
            y = rk4(self._rhs_v(), self.states[j], np.array([self.v[j], v]), project=_symmetrize_state(self.n))[-1]
        return _unpack(y, self.n)

    def distance_form(self, t: float) -> DistanceForm:
        P, G, Pi0, _ = self.state_at(t)
        return assemble_distance_form(self.t0, t, G, P, Pi0, source="forward-family")

    def theta(self, t: float, variant: str = "gramian") -> float:
        """Trace rate at ``t``.

        ``gramian``: ``tr(A + B B' M22)``, the rate that makes the kernel solve
        the forward equation in ``y``. ``initial-block``: the same expression
        with ``M11``; it coincides with the former only for x/y-symmetric
        forms. ``jacobi``: ``0.5 d/dt log det Gamma_hat + 0.5 tr(Q Gamma_hat)``.
        """
        P, G, Pi0, _ = self.state_at(t)
        sys = self.sys
        A, Bt, Q = sys.A(t), sys.B(t), sys.Q(t)
        if variant == "gramian":
            return float(np.trace(A) + np.trace(Bt.T @ np.linalg.solve(P, Bt)))
        if variant == "initial-block":
            M = assemble_distance_form(self.t0, t, G, P, Pi0)
            return float(np.trace(A) + np.trace(Bt @ Bt.T @ M.M11))
        if variant == "jacobi":
            dP = A @ P + P @ A.T + 2.0 * Bt @ Bt.T - P @ Q @ P
            return float(0.5 * np.trace(np.linalg.solve(P, dP)) + 0.5 * np.trace(Q @ P))
        raise ValueError(f"unknown theta variant {variant!r}")

    def prefactor(self, deltas=None) -> "Normalizer":
        return prefactor_and_normalizer(self, deltas)

    def evaluator(self, t: float | None = None, case: str | None = None) -> "KernelEvaluator":
        return _make_evaluator(self, self.t_max if t is None else t, case)


def forward_family(
    sys: LtvSystem,
    t_max: float | None = None,
    t0: float | None = None,
    per_octave: int = DEFAULT_PER_OCTAVE,
    delta_fraction: float = DEFAULT_DELTA_FRACTION,
    halvings: int = DEFAULT_HALVINGS,
) -> KernelFamily:
    """Sweep the kernel data from ``t0`` to ``t_max``.

    The delta offsets are ``delta_fraction * (t_max - t0) / 2**k`` for
    ``k = 0..halvings``. The node layout depends on ``t_max - t0`` only
    through a common scale, so quantities computed for nearby ``t_max``
    vary smoothly (the finite-difference residual check relies on this).
    """
    t0 = sys.t0 if t0 is None else float(t0)
    t_max = sys.t1 if t_max is None else float(t_max)
    T = t_max - t0
    if not T > 0:
        raise DegenerateTimeError("forward_family needs t_max > t0")
    n = sys.n
    delta0 = delta_fraction * T
    deltas = delta0 / 2.0 ** np.arange(halvings + 1)
    d_min = deltas[-1]
    # start-up from the exact initial data on a short uniform grid
    f = _family_rhs(sys, t0, n, False)
    y0 = _pack(np.zeros((n, n)), np.eye(n), np.zeros((n, n)), 0.0)
    y_start = rk4(f, y0, t0 + np.linspace(0.0, d_min, 17), project=_symmetrize_state(n), label="kernel start-up")[-1]
    y_start[-1] = 0.0
    dv = math.log(2.0) / per_octave
    v_min, v_max = math.log(d_min), math.log(T)
    k_full = int(math.floor((v_max - v_min) / dv + 1e-9))
    v = v_min + dv * np.arange(k_full + 1)
    if v_max - v[-1] > 1e-12:
        v = np.append(v, v_max)
    else:
        v[-1] = v_max
    fam = KernelFamily(sys, t0, t_max, per_octave, deltas, v, np.empty(0))
    states = rk4(fam._rhs_v(), y_start, v, project=_symmetrize_state(n), label="kernel sweep")
    object.__setattr__(fam, "states", states)
    return fam


# --- normalizer by matched asymptotics --------------------------------------


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Delta-anchored normalizer ``c`` and its extrapolation diagnostics.

    ``log_c(t) = log_c_constant - I(t)`` where ``I`` is the family's running
    theta integral; ``raw[k]`` is the constant obtained from the anchor at
    ``deltas[k]`` and ``tableau`` the Richardson table built from them.
    """

    family: KernelFamily = field(repr=False)
    deltas: np.ndarray
    raw: np.ndarray
    tableau: np.ndarray = field(repr=False)
    log_c_constant: float

    def log_c(self, t: float) -> float:
        return self.log_c_constant - float(self.family.state_at(t)[3])

    def c(self, t: float) -> float:
        return math.exp(self.log_c(t))

    @property
    def a(self) -> float:
        """Prefactor in the general convention ``c = a exp(-Theta)``, ``a = (2 pi)^(-n/2)``."""
        return (2.0 * math.pi) ** (-self.family.n / 2.0)

    def Theta(self, t: float) -> float:
        return math.log(self.a) - self.log_c(t)


def richardson(values, ratio: float = 2.0) -> np.ndarray:
    """Full Richardson tableau for a sequence at step sizes ``h / ratio**k``.

    Column ``j`` removes the ``h**j`` error term; ``table[-1, -1]`` is the
    most extrapolated value.
    """
    values = np.asarray(values, dtype=float)
    m = values.size
    T = np.full((m, m), np.nan)
    T[:, 0] = values
    for j in range(1, m):
        f = ratio**j
        for k in range(j, m):
            T[k, j] = (f * T[k, j - 1] - T[k - 1, j - 1]) / (f - 1.0)
    return T


def prefactor_and_normalizer(family: KernelFamily, deltas=None) -> Normalizer:
    """Anchor ``c`` at each small offset and extrapolate to zero offset.

    At ``t0 + delta`` the kernel is within ``O(delta)`` of a unit Gaussian
    in ``y``, so ``log c(t0 + delta) ~ -(n/2) log(2 pi) + 0.5 log det M22``.
    Propagating with ``dc/dt = -theta c`` gives one estimate of the constant
    per offset. The successive differences must shrink; otherwise
    :class:`LimitNonconvergenceError` is raised.
    """
    deltas = family.deltas if deltas is None else np.asarray(deltas, dtype=float)
    if deltas.size < 2 or np.any(np.diff(deltas) >= 0):
        raise ValueError("deltas must be a decreasing sequence of at least two offsets")
    ratios = deltas[:-1] / deltas[1:]
    if not np.allclose(ratios, ratios[0], rtol=1e-9):
        raise ValueError("deltas must shrink by a constant ratio")
    n = family.n
    raw = np.empty(deltas.size)
    for k, d in enumerate(deltas):
        P, _, _, I = family.state_at(family.t0 + d)
        _, logdet_P = _spd_inverse(P, f"Gramian at offset {d:g}")
        raw[k] = -0.5 * n * LOG_2PI - 0.5 * logdet_P + I
    table = richardson(raw, ratios[0])
    diffs = np.abs(np.diff(raw))
    # below this the spread is integrator error, not a missing limit
    floor = 1e-7 * max(1.0, float(np.max(np.abs(raw))))
    for k in range(1, diffs.size):
        if diffs[k] > floor and diffs[k] > diffs[k - 1] * (1.0 + 1e-6):
            raise LimitNonconvergenceError(
                f"normalizer estimates do not settle as delta shrinks: differences {diffs.tolist()}"
            )
    return Normalizer(family, deltas, raw, table, float(table[-1, -1]))


# --- evaluator -----------------------------------------------------------------


def detect_case(sys: LtvSystem, tol: float = 0.0) -> str:
    """``heat``, ``diagonal``, ``linear`` or ``general`` from the system data."""
    n = sys.n

    def const_eq(tr, M):
        return tr.is_constant and tr.shape == M.shape and np.max(np.abs(tr.value - M), initial=0.0) <= tol

    q_zero = sys.Q.is_zero or (
        sys.Q.kind == "tabulated" and not np.any(sys.Q.matrices)
    )
    zero, eye = np.zeros((n, n)), np.eye(n)
    if const_eq(sys.A, zero) and const_eq(sys.B, eye):
        if q_zero:
            return "heat"
        Qv = sys.Q.value if sys.Q.is_constant else None
        if Qv is not None and not np.any(Qv - np.diag(np.diag(Qv))) and np.all(np.diag(Qv) > 0):
            return "diagonal"
    return "linear" if q_zero else "general"


@dataclass(frozen=True, eq=False)
class KernelEvaluator:
    """Kernel ``kappa(t0, ., t, .)`` ready for evaluation.

    ``log_c`` is the normalizer in use. For ``Q = 0`` systems it comes from
    mass conservation; ``log_c_matched`` always holds the matched-asymptotics
    value so the two can be compared. ``a`` and ``Theta`` split ``c`` as
    ``c = a exp(-Theta)`` using the case's own convention (``(4 pi)^(-n/2)``
    for heat, ``prod sqrt(omega_i / 4 pi)`` for the diagonal case and
    ``(2 pi)^(-n/2)`` otherwise).
    """

    M: DistanceForm
    log_c: float
    log_c_matched: float
    log_c_normalized: float | None
    a: float
    Theta: float
    case_tag: str
    normalizer: Normalizer = field(repr=False)

    @property
    def n(self) -> int:
        return self.M.n

    @property
    def t0(self) -> float:
        return self.M.t0

    @property
    def t(self) -> float:
        return self.M.t

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    def log_value(self, x, y):
        return self.log_c - squared_distance(self.M, x, y)

    def __call__(self, x, y):
        return np.exp(self.log_value(x, y))

    def mass(self, x) -> np.ndarray | float:
        """``int kappa(t0, x, t, y) dy`` in closed form."""
        M = self.M
        S = sym(M.M11 - M.M12 @ np.linalg.solve(M.M22, M.M21))
        x = np.asarray(x, dtype=float)
        x = x[..., None] if self.n == 1 and (x.ndim == 0 or x.shape[-1] != 1) else x
        quad = np.einsum("...i,ij,...j->...", x, S, x)
        logm = self.log_c + 0.5 * self.n * LOG_2PI + 0.5 * M.logdet_Gamma_hat - 0.5 * quad
        out = np.exp(logm)
        return float(out) if np.ndim(out) == 0 else out

    def metadata(self) -> dict:
        fam = self.normalizer.family
        return {
            "t0": self.t0,
            "t": self.t,
            "n": self.n,
            "case_tag": self.case_tag,
            "a": self.a,
            "Theta": self.Theta,
            "c": self.c,
            "log_c": self.log_c,
            "log_c_matched": self.log_c_matched,
            "log_c_normalized": self.log_c_normalized,
            "per_octave": fam.per_octave,
            "log_time_nodes": int(fam.v.size),
            "deltas": fam.deltas.tolist(),
            "distance_form_pd": self.M.pd,
            "distance_form_rank": self.M.rank,
            **self.M.symmetry_report(),
        }


def _make_evaluator(family: KernelFamily, t: float, case: str | None) -> KernelEvaluator:
    case = detect_case(family.sys) if case is None else case
    M = family.distance_form(t)
    norm = prefactor_and_normalizer(family)
    n = family.n
    s = t - family.t0
    log_c_matched = norm.log_c(t)
    log_c_normalized = None
    log_c = log_c_matched
    if case in ("heat", "linear"):
        log_c_normalized = -0.5 * n * LOG_2PI - 0.5 * M.logdet_Gamma_hat
        log_c = log_c_normalized
    if case == "heat":
        log_a = -0.5 * n * math.log(4.0 * math.pi)
        Theta = 0.5 * n * math.log(s)
    elif case == "diagonal":
        omega = 2.0 * np.sqrt(0.5 * np.diag(family.sys.Q.value))
        Theta = 0.5 * float(np.sum(np.log(np.sinh(omega * s))))
        log_a = log_c + Theta
    else:
        log_a = -0.5 * n * LOG_2PI
        Theta = log_a - log_c
    return KernelEvaluator(M, log_c, log_c_matched, log_c_normalized, math.exp(log_a), Theta, case, norm)


def build_kernel(
    sys: LtvSystem,
    t: float | None = None,
    t0: float | None = None,
    per_octave: int = DEFAULT_PER_OCTAVE,
    case: str | None = None,
) -> KernelEvaluator:
    """Kernel from ``t0`` (default: horizon start) to ``t`` (default: horizon end)."""
    t0 = sys.t0 if t0 is None else float(t0)
    t = sys.t1 if t is None else float(t)
    return forward_family(sys, t, t0, per_octave=per_octave).evaluator(t, case)


def kernel_eval(K: KernelEvaluator, x, y):
    return K(x, y)


def theta(source, tau: float | None = None, variant: str = "gramian") -> float:
    """Trace rate from a :class:`KernelFamily` (any ``tau``) or a closed-loop system (its own ``t``)."""
    if isinstance(source, KernelFamily):
        if tau is None:
            tau = source.t_max
        return source.theta(tau, variant)
    cl = source
    tau = cl.t if tau is None else float(tau)
    if tau <= cl.t0:
        raise DegenerateTimeError("theta diverges at t0")
    if abs(tau - cl.t) > 1e-12 * max(1.0, abs(tau)):
        raise ValueError("a closed-loop system only provides theta at its own terminal time")
    sys = cl.sys
    A, Bt = sys.A(tau), sys.B(tau)
    M = distance_form(cl)
    block = {"gramian": M.M22, "initial-block": M.M11}.get(variant)
    if block is None:
        raise ValueError(f"variant {variant!r} needs a KernelFamily")
    return float(np.trace(A) + np.trace(Bt @ Bt.T @ block))


# --- closed forms ------------------------------------------------------------


def _vec(v, n):
    v = np.asarray(v, dtype=float)
    if n == 1 and (v.ndim == 0 or v.shape[-1] != 1):
        v = v[..., None]
    return v


def heat_kernel(s: float, x, y) -> np.ndarray | float:
    """``(4 pi s)^(-n/2) exp(-|x - y|^2 / (4 s))``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    n = x.shape[-1]
    r2 = np.sum((x - y) ** 2, axis=-1)
    out = (4.0 * math.pi * s) ** (-n / 2.0) * np.exp(-r2 / (4.0 * s))
    return float(out) if np.ndim(out) == 0 else out


def linear_kernel(s: float, Phi, Gamma, x, y) -> np.ndarray | float:
    """Zero-killing kernel from ``Phi = Phi(t, t0)`` and ``Gamma = int Phi B B' Phi'``.

    Written with the horizon-averaged Gramian ``Gamma / s`` so that it
    reduces to :func:`heat_kernel` when ``(A, B) = (0, I)``.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    Gbar = np.atleast_2d(np.asarray(Gamma, dtype=float)) / s
    n = Phi.shape[0]
    x, y = _vec(x, n), _vec(y, n)
    r = np.einsum("ij,...j->...i", Phi, x) - y
    Ginv, logdet = _spd_inverse(Gbar, "averaged Gramian")
    quad = np.einsum("...i,ij,...j->...", r, Ginv, r)
    out = (4.0 * math.pi * s) ** (-n / 2.0) * math.exp(-0.5 * logdet) * np.exp(-quad / (4.0 * s))
    return float(out) if np.ndim(out) == 0 else out


def diagonal_kernel(s: float, D, x, y) -> np.ndarray | float:
    """Kernel for ``(A, B, Q) = (0, I, 2 diag(D))`` written per axis with ``omega = 2 sqrt(D)``."""
    D = np.asarray(D, dtype=float)
    if D.ndim == 2:
        if np.any(D - np.diag(np.diag(D))):
            raise DomainError("diagonal closed form needs a diagonal D")
        D = np.diag(D)
    D = np.atleast_1d(D)
    if np.any(D <= 0):
        raise DomainError("diagonal closed form needs D > 0")
    n = D.size
    x, y = _vec(x, n), _vec(y, n)
    w = 2.0 * np.sqrt(D)
    sh, ch = np.sinh(w * s), np.cosh(w * s)
    a = float(np.prod(np.sqrt(w / (4.0 * math.pi))))
    expo = np.sum(w / (4.0 * sh) * ((x**2 + y**2) * ch - 2.0 * x * y), axis=-1)
    out = a * float(np.prod(sh ** -0.5)) * np.exp(-expo)
    return float(out) if np.ndim(out) == 0 else out


def closed_form_kernel(case: str, params: dict, t0: float, x, t: float, y):
    """Evaluate a special-case kernel without solving any Riccati equation.

    ``params``: nothing for ``heat``; ``Phi`` and ``Gamma`` (or ``sys`` to
    compute them) for ``linear``; ``D`` for ``diagonal``.
    """
    s = float(t) - float(t0)
    if s <= 0:
        raise DegenerateTimeError("closed forms need t > t0")
    if case == "heat":
        return heat_kernel(s, x, y)
    if case == "linear":
        if "sys" in params:
            sys = params["sys"]
            Phi, Gam2 = transition_and_gramian(sys.A, sys.noise, t0, t, params.get("steps", sys.steps_for(t0, t)))
            return linear_kernel(s, Phi, 0.5 * Gam2, x, y)
        return linear_kernel(s, params["Phi"], params["Gamma"], x, y)
    if case == "diagonal":
        return diagonal_kernel(s, params["D"], x, y)
    raise ValueError(f"unknown closed-form case {case!r}")


def diagonal_blocks(D, s: float):
    """Exact ``(M11, M12, M22)`` for the diagonal case."""
    D = np.atleast_1d(np.asarray(D, dtype=float))
    w = 2.0 * np.sqrt(D)
    rd = np.sqrt(D)
    return np.diag(rd / np.tanh(w * s)), np.diag(-rd / np.sinh(w * s)), np.diag(rd / np.tanh(w * s))


def gaussian_integral(Aq, b) -> float:
    """``int exp(-0.5 x' Aq x + b' x) dx = sqrt((2 pi)^n / det Aq) exp(0.5 b' Aq^-1 b)``."""
    Aq = np.atleast_2d(np.asarray(Aq, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if np.max(np.abs(Aq - Aq.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(Aq))):
        raise DomainError("Gaussian integral needs a symmetric matrix")
    try:
        cf = cho_factor(Aq, lower=True)
    except np.linalg.LinAlgError as exc:
        raise DomainError("Gaussian integral needs a positive definite matrix") from exc
    n = Aq.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    quad = float(b @ cho_solve(cf, b))
    return math.exp(0.5 * n * LOG_2PI - 0.5 * logdet + 0.5 * quad)


# --- export ------------------------------------------------------------------


def kernel_slice(K: KernelEvaluator, x, axes) -> tuple[np.ndarray, np.ndarray]:
    """Kernel on the tensor grid spanned by ``axes`` (one 1-D array per state axis)."""
    if len(axes) != K.n:
        raise ValueError("need one axis per state dimension")
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    Y = np.stack([m.ravel() for m in mesh], axis=-1)
    X = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=float)), Y.shape)
    return Y, np.atleast_1d(K(X, Y))


def export_slice(K: KernelEvaluator, x, axes, path, write_csv: Callable | None = None) -> tuple[Path, Path]:
    """Write a kernel slice CSV (columns ``y0..y{n-1}, kappa``) and a JSON sidecar."""
    from .cli import emit_csv

    write_csv = emit_csv if write_csv is None else write_csv
    Y, vals = kernel_slice(K, x, axes)
    path = Path(path)
    cols = [f"y{i}" for i in range(K.n)] + ["kappa"]
    write_csv(cols, np.column_stack([Y, vals]), path)
    meta = {**K.metadata(), "x": np.atleast_1d(x).tolist(), "grid": [len(a) for a in axes]}
    side = path.with_suffix(".json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, side
