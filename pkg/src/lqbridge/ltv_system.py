"""Time-varying system data, state transition matrices and Gramians.

The diffusion under study is ``dx = A_t x dt + sqrt(2) B_t dw`` with mass
killed at rate ``x' Q_t x / 2``. Everything here is open-loop; the
feedback-shifted pair lives in :mod:`lqbridge.riccati`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from ._rk4 import rk4, sym

DEFAULT_STEPS_PER_UNIT = 256
MIN_STEPS = 64
Q_ASYMMETRY_TOL = 1e-10


class DegenerateHorizonWarning(UserWarning):
    """Gramian requested over an empty interval."""


@dataclass(frozen=True, eq=False)
class MatrixTrajectory:
    """A matrix-valued function of time.

    Use the ``constant``, ``tabulated`` and ``from_function`` constructors
    rather than the raw initializer.
    """

    kind: str
    shape: tuple[int, int]
    evaluate: Callable[[float], np.ndarray] = field(repr=False)
    value: np.ndarray | None = field(default=None, repr=False)
    times: np.ndarray | None = field(default=None, repr=False)
    matrices: np.ndarray | None = field(default=None, repr=False)
    interpolation: str | None = None
    name: str = ""

    @classmethod
    def constant(cls, M) -> "MatrixTrajectory":
        M = np.atleast_2d(np.asarray(M, dtype=float)).copy()
        if not np.all(np.isfinite(M)):
            raise ValueError("constant matrix has non-finite entries")
        M.setflags(write=False)
        return cls("constant", M.shape, lambda tau, _M=M: _M, value=M)

    @classmethod
    def tabulated(cls, times, matrices, interpolation: str = "linear") -> "MatrixTrajectory":
        times = np.asarray(times, dtype=float)
        mats = np.asarray(matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[:, :, None]
        if times.ndim != 1 or times.size < 2 or mats.shape[0] != times.size:
            raise ValueError("tabulated trajectory needs >= 2 times and one matrix per time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("tabulated times must be strictly increasing")
        if not np.all(np.isfinite(mats)):
            raise ValueError("tabulated matrices have non-finite entries")
        lo, hi = times[0], times[-1]
        span = hi - lo
        if interpolation == "linear":

            def ev(tau, _t=times, _m=mats):
                _check_range(tau, lo, hi, span)
                j = int(np.clip(np.searchsorted(_t, tau, side="right") - 1, 0, _t.size - 2))
                w = (tau - _t[j]) / (_t[j + 1] - _t[j])
                return (1.0 - w) * _m[j] + w * _m[j + 1]

        elif interpolation == "cubic":
            spline = CubicSpline(times, mats, axis=0)

            def ev(tau, _s=spline):
                _check_range(tau, lo, hi, span)
                return _s(tau)

        else:
            raise ValueError(f"unknown interpolation {interpolation!r}")
        return cls(
            "tabulated",
            mats.shape[1:],
            ev,
            times=times,
            matrices=mats,
            interpolation=interpolation,
        )

    @classmethod
    def from_function(cls, fn: Callable[[float], Any], shape, name: str = "") -> "MatrixTrajectory":
        shape = tuple(int(s) for s in shape)

        def ev(tau, _fn=fn):
            return np.asarray(_fn(tau), dtype=float).reshape(shape)

        return cls("builtin", shape, ev, name=name)

    def __call__(self, tau: float) -> np.ndarray:
        return self.evaluate(float(tau))

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def is_zero(self) -> bool:
        return self.kind == "constant" and not np.any(self.value)

    def sample_times(self, t0: float, t1: float, count: int = 65) -> np.ndarray:
        if self.kind == "tabulated":
            inner = self.times[(self.times >= t0) & (self.times <= t1)]
            return np.unique(np.concatenate([[t0, t1], inner]))
        if self.kind == "constant":
            return np.array([t0])
        return np.linspace(t0, t1, count)

    def to_json(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value.tolist()}
        if self.kind == "tabulated":
            return {
                "kind": "tabulated",
                "times": self.times.tolist(),
                "matrices": self.matrices.tolist(),
                "interpolation": self.interpolation,
            }
        return {"kind": "builtin", "name": self.name}


def _check_range(tau, lo, hi, span):
    slack = 1e-12 * max(1.0, span)
    if tau < lo - slack or tau > hi + slack:
        raise ValueError(f"time {tau} outside tabulated range [{lo}, {hi}]")


def _symmetrized(Q: MatrixTrajectory) -> MatrixTrajectory:
    if Q.kind == "constant":
        return MatrixTrajectory.constant(sym(Q.value))
    if Q.kind == "tabulated":
        return MatrixTrajectory.tabulated(Q.times, sym(Q.matrices), Q.interpolation)
    return MatrixTrajectory.from_function(lambda tau, _Q=Q: sym(_Q(tau)), Q.shape, name=Q.name)


@dataclass(frozen=True, eq=False)
class LtvSystem:
    """System data ``(A_t, B_t, Q_t)`` on the horizon ``[t0, t1]``.

    ``Q`` is symmetrized on construction; an asymmetric part larger than
    1e-10 (relative) is rejected. The noise gain ``sqrt(2) B`` is exposed as
    :meth:`Bhat` and never stored.
    """

    A: MatrixTrajectory
    B: MatrixTrajectory
    Q: MatrixTrajectory
    t0: float
    t1: float
    steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
    name: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n, m = self.B.shape
        if self.A.shape != (n, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(n, n)}")
        if self.Q.shape != (n, n):
            raise ValueError(f"Q has shape {self.Q.shape}, expected {(n, n)}")
        if not self.t0 < self.t1:
            raise ValueError("horizon must satisfy t0 < t1")
        for tau in self.Q.sample_times(self.t0, self.t1):
            Qt = self.Q(tau)
            skew = np.max(np.abs(Qt - Qt.T)) if Qt.size else 0.0
            if skew > Q_ASYMMETRY_TOL * max(1.0, np.max(np.abs(Qt))):
                raise ValueError(f"Q is not symmetric at t={tau} (asymmetry {skew:.3g})")
        object.__setattr__(self, "Q", _symmetrized(self.Q))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "t1", float(self.t1))

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def Bhat(self, tau: float) -> np.ndarray:
        return math.sqrt(2.0) * self.B(tau)

    def noise(self, tau: float) -> np.ndarray:
        """``Bhat Bhat'`` = ``2 B B'``."""
        Bt = self.B(tau)
        return 2.0 * Bt @ Bt.T

    def steps_for(self, start: float, end: float) -> int:
        return max(MIN_STEPS, int(math.ceil(self.steps_per_unit * (end - start) - 1e-9)))

    def grid(self, start: float, end: float, steps: int | None = None) -> np.ndarray:
        steps = self.steps_for(start, end) if steps is None else int(steps)
        return np.linspace(start, end, steps + 1)

    def with_horizon(self, t0: float, t1: float) -> "LtvSystem":
        return LtvSystem(self.A, self.B, self.Q, t0, t1, self.steps_per_unit, self.name, self.params)

    def with_Q(self, Q: MatrixTrajectory) -> "LtvSystem":
        return LtvSystem(self.A, self.B, Q, self.t0, self.t1, self.steps_per_unit, self.name, self.params)

    def to_json(self) -> dict:
        if self.name in BUILTINS:
            return {"builtin": self.name, "horizon": [self.t0, self.t1], **dict(self.params)}
        return {
            "n": self.n,
            "m": self.m,
            "horizon": [self.t0, self.t1],
            "A": self.A.to_json(),
            "B": self.B.to_json(),
            "Q": self.Q.to_json(),
        }


def state_transition(A: MatrixTrajectory, t: float, tau: float, steps: int | None = None) -> np.ndarray:
    """Transition matrix ``Phi_{t tau}`` of ``dx/ds = A_s x`` by fixed-step RK4.

    ``steps`` defaults to 256 per unit time (at least 64).
    """
    if t < tau:
        raise ValueError("state_transition expects tau <= t")
    n = A.shape[0]
    if t == tau:
        return np.eye(n)
    steps = max(MIN_STEPS, math.ceil(DEFAULT_STEPS_PER_UNIT * (t - tau) - 1e-9)) if steps is None else steps
    grid = np.linspace(tau, t, steps + 1)
    out = rk4(lambda s, P: A(s) @ P, np.eye(n), grid, label="state transition")
    return out[-1]


def transition_and_gramian(
    A: MatrixTrajectory,
    noise: Callable[[float], np.ndarray],
    t0: float,
    t: float,
    steps: int,
    all_nodes: bool = False,
):
    """Integrate ``Phi`` and the Gramian ``W`` jointly from ``t0``.

    ``W`` obeys ``dW/ds = A W + W A' + noise(s)`` with ``W(t0) = 0`` so that
    ``W(t) = int Phi_{t s} noise(s) Phi_{t s}' ds``.
    """
    n = A.shape[0]
    grid = np.linspace(t0, t, steps + 1)

    def rhs(s, Y):
        As = A(s)
        P, W = Y[0], Y[1]
        return np.stack([As @ P, As @ W + W @ As.T + noise(s)])

    Y0 = np.stack([np.eye(n), np.zeros((n, n))])
    out = rk4(rhs, Y0, grid, label="gramian")
    Phi, W = out[:, 0], sym(out[:, 1])
    if all_nodes:
        return grid, Phi, W
    return Phi[-1], W[-1]


def controllability_gramian(
    sys: LtvSystem,
    t0: float | None = None,
    t: float | None = None,
    closed_loop: bool = False,
    steps: int | None = None,
) -> np.ndarray:
    """``Gamma_{t t0} = int Phi_{t s} Bhat_s Bhat_s' Phi_{t s}' ds``.

    With ``closed_loop=True`` the feedback-shifted drift is used (the
    Riccati solution is anchored at ``t``). A zero-length interval returns
    the zero matrix and issues :class:`DegenerateHorizonWarning`.
    """
    t0 = sys.t0 if t0 is None else float(t0)
    t = sys.t1 if t is None else float(t)
    if t < t0:
        raise ValueError("controllability_gramian expects t0 <= t")
    if t == t0:
        warnings.warn("zero-length horizon: Gramian is the zero matrix", DegenerateHorizonWarning, stacklevel=2)
        return np.zeros((sys.n, sys.n))
    if closed_loop:
        from .riccati import closed_loop as _closed_loop

        return _closed_loop(sys, t, t0=t0, steps=steps).Gamma_hat
    steps = sys.steps_for(t0, t) if steps is None else steps
    return transition_and_gramian(sys.A, sys.noise, t0, t, steps)[1]


@dataclass(frozen=True)
class AssumptionReport:
    gramian_min_eig: float
    controllable: bool
    q_psd_ok: bool
    q_min_eig: float
    q_pd_witness: float | None
    tol: float
    horizon: tuple[float, float]

    @property
    def q_strict_ok(self) -> bool:
        return self.q_pd_witness is not None

    def rows(self) -> list[tuple[str, str]]:
        return [
            ("horizon", f"[{self.horizon[0]:g}, {self.horizon[1]:g}]"),
            ("gramian_min_eig", f"{self.gramian_min_eig:.6e}"),
            ("controllable", str(self.controllable)),
            ("Q psd everywhere", str(self.q_psd_ok)),
            ("Q min eigenvalue", f"{self.q_min_eig:.6e}"),
            ("Q pd witness", "none" if self.q_pd_witness is None else f"{self.q_pd_witness:g}"),
            ("tolerance", f"{self.tol:g}"),
        ]


def check_assumptions(sys: LtvSystem, tol: float = 1e-9) -> AssumptionReport:
    """Controllability of ``(A, B)`` and semidefiniteness of ``Q`` on the horizon.

    Controllability is checked once on the full horizon. Failures are
    verdicts in the report, not exceptions.
    """
    G = controllability_gramian(sys)
    eg = np.linalg.eigvalsh(G)
    controllable = bool(eg[0] > tol * max(eg[-1], np.finfo(float).tiny))

    q_psd, witness, qmin = True, None, np.inf
    for tau in sys.grid(sys.t0, sys.t1):
        ev = np.linalg.eigvalsh(sys.Q(tau))
        scale = max(abs(ev[-1]), abs(ev[0]))
        qmin = min(qmin, ev[0])
        if ev[0] < -tol * max(scale, 1e-300):
            q_psd = False
        if witness is None and ev[-1] > 0 and ev[0] > tol * ev[-1]:
            witness = float(tau)
    return AssumptionReport(
        gramian_min_eig=float(eg[0]),
        controllable=controllable,
        q_psd_ok=q_psd,
        q_min_eig=float(qmin),
        q_pd_witness=witness,
        tol=tol,
        horizon=(sys.t0, sys.t1),
    )


# --- builtin systems -------------------------------------------------------


def heat(n: int = 1, horizon: Sequence[float] = (0.0, 1.0), **kw) -> LtvSystem:
    """``(A, B, Q) = (0, I, 0)``: the plain heat kernel."""
    n = int(n)
    return LtvSystem(
        MatrixTrajectory.constant(np.zeros((n, n))),
        MatrixTrajectory.constant(np.eye(n)),
        MatrixTrajectory.constant(np.zeros((n, n))),
        *horizon,
        name="heat",
        params={"n": n},
        **kw,
    )


def diagonal_case(D=(0.25,), horizon: Sequence[float] = (0.0, 1.0), **kw) -> LtvSystem:
    """``(A, B, Q) = (0, I, 2 diag(D))`` with ``D > 0``."""
    D = np.atleast_1d(np.asarray(D, dtype=float))
    if D.ndim != 1 or np.any(D <= 0):
        raise ValueError("diagonal_case needs a positive vector D")
    n = D.size
    return LtvSystem(
        MatrixTrajectory.constant(np.zeros((n, n))),
        MatrixTrajectory.constant(np.eye(n)),
        MatrixTrajectory.constant(2.0 * np.diag(D)),
        *horizon,
        name="diagonal_case",
        params={"D": D.tolist()},
        **kw,
    )


def linear_example(horizon: Sequence[float] = (0.0, 1.0), **kw) -> LtvSystem:
    """Damped oscillator with time-varying stiffness, scalar input, no killing."""
    A = MatrixTrajectory.from_function(
        lambda t: [[0.0, 1.0], [-(1.0 + 0.5 * math.sin(t)), -0.3]], (2, 2), name="linear_example.A"
    )
    B = MatrixTrajectory.constant([[0.0], [1.0]])
    return LtvSystem(A, B, MatrixTrajectory.constant(np.zeros((2, 2))), *horizon, name="linear_example", **kw)


def time_varying(horizon: Sequence[float] = (0.0, 1.0), **kw) -> LtvSystem:
    """2-D system with a sinusoidal drift entry and ``Q_t = (1 + sin(t)/2) I``."""
    A = MatrixTrajectory.from_function(
        lambda t: [[-0.2, 1.0], [-1.0, 0.3 * math.sin(2.0 * t)]], (2, 2), name="time_varying.A"
    )
    B = MatrixTrajectory.constant([[1.0, 0.0], [0.3, 0.8]])
    Q = MatrixTrajectory.from_function(lambda t: (1.0 + 0.5 * math.sin(t)) * np.eye(2), (2, 2), name="time_varying.Q")
    return LtvSystem(A, B, Q, *horizon, name="time_varying", **kw)


BUILTINS: dict[str, Callable[..., LtvSystem]] = {
    "heat": heat,
    "diagonal_case": diagonal_case,
    "linear_example": linear_example,
    "time_varying": time_varying,
}


def _trajectory_from_json(doc, shape, label: str) -> MatrixTrajectory:
    if isinstance(doc, (list, int, float)):
        doc = {"kind": "constant", "value": doc}
    if not isinstance(doc, Mapping) or "kind" not in doc:
        raise ValueError(f"{label}: expected an object with a 'kind' field")
    kind = doc["kind"]
    if kind == "constant":
        if "value" not in doc:
            raise ValueError(f"{label}: missing field 'value'")
        traj = MatrixTrajectory.constant(np.asarray(doc["value"], dtype=float).reshape(shape))
    elif kind == "tabulated":
        for key in ("times", "matrices"):
            if key not in doc:
                raise ValueError(f"{label}: missing field {key!r}")
        mats = np.asarray(doc["matrices"], dtype=float).reshape((-1,) + tuple(shape))
        traj = MatrixTrajectory.tabulated(doc["times"], mats, doc.get("interpolation", "linear"))
    else:
        raise ValueError(f"{label}: unknown kind {kind!r}")
    if traj.shape != tuple(shape):
        raise ValueError(f"{label}: shape {traj.shape} does not match {tuple(shape)}")
    return traj


def system_from_json(doc: Mapping[str, Any]) -> LtvSystem:
    """Build a system from its JSON description.

    Either ``{"builtin": name, ...params}`` or explicit ``n``, ``m``,
    ``horizon`` and per-matrix ``A``, ``B``, ``Q`` entries.
    """
    doc = dict(doc)
    spu = int(doc.pop("steps_per_unit", DEFAULT_STEPS_PER_UNIT))
    if "builtin" in doc:
        name = doc.pop("builtin")
        if name not in BUILTINS:
            raise ValueError(f"unknown builtin system {name!r}; choose from {sorted(BUILTINS)}")
        horizon = doc.pop("horizon", (0.0, 1.0))
        return BUILTINS[name](horizon=horizon, steps_per_unit=spu, **doc)
    for key in ("n", "m", "horizon", "A", "B", "Q"):
        if key not in doc:
            raise ValueError(f"system: missing field {key!r}")
    n, m = int(doc["n"]), int(doc["m"])
    t0, t1 = doc["horizon"]
    A = _trajectory_from_json(doc["A"], (n, n), "system.A")
    B = _trajectory_from_json(doc["B"], (n, m), "system.B")
    Q = _trajectory_from_json(doc["Q"], (n, n), "system.Q")
    return LtvSystem(A, B, Q, t0, t1, steps_per_unit=spu, name=doc.get("name", ""))
