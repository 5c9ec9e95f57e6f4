"""Brute-force validators: a transcribed optimal-control solve, a PDE residual
probe and a Feynman-Kac Monte Carlo estimator, plus a validation report that
strings them together."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .kernel import KernelEvaluator, build_kernel, closed_form_kernel, squared_distance
from .ltv_system import LtvSystem, MatrixTrajectory, check_assumptions
from .riccati import riccati_via_hamiltonian, solve_riccati


class InfeasibleOcpError(np.linalg.LinAlgError):
    """The transcribed transfer problem has no solution for generic endpoints."""


class SimulationBlowupError(FloatingPointError):
    def __init__(self, message: str, seed: int, step: int):
        super().__init__(message)
        self.seed = seed
        self.step = step


# --- direct transcription ----------------------------------------------------


@dataclass(frozen=True)
class OcpSolution:
    cost: float
    times: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)
    kkt_residual: float = 0.0
    boundary_error: float = 0.0
    iterations: int = 1


class DirectTranscription:
    """Factorized KKT system of the transcribed problem

        minimize  sum_k h |u_k|^2 / 2 + trapezoid(z' Q z / 2)
        s.t.      z_{k+1} - z_k = h/2 (A_k z_k + A_{k+1} z_{k+1}) + h/2 (Bh_k + Bh_{k+1}) u_k,
                  z_0 = x,  z_N = y,

    with piecewise-constant ``u``. The factorization is reused for every
    endpoint pair.
    """

    def __init__(self, sys: LtvSystem, t0: float, t: float, grid_n: int):
        if not t > t0:
            raise ValueError("need t > t0")
        n, m, N = sys.n, sys.m, int(grid_n)
        self.n, self.m, self.N = n, m, N
        self.times = np.linspace(t0, t, N + 1)
        h = (t - t0) / N
        A = np.array([sys.A(s) for s in self.times])
        Bh = np.array([sys.Bhat(s) for s in self.times])
        Q = np.array([sys.Q(s) for s in self.times])
        self._check_controllable(A, Bh, h)
        nz, nu = (N + 1) * n, N * m
        self.nz, self.nu = nz, nu
        wq = np.full(N + 1, h)
        wq[[0, -1]] = 0.5 * h
        Hz = sp.block_diag([wq[k] * Q[k] for k in range(N + 1)])
        Hu = sp.identity(nu) * h
        H = sp.block_diag([Hz, Hu]).tocsr()
        I = np.eye(n)
        dyn = sp.lil_matrix((N * n, nz + nu))
        for k in range(N):
            r = slice(k * n, (k + 1) * n)
            dyn[r, k * n : (k + 1) * n] = -(I + 0.5 * h * A[k])
            dyn[r, (k + 1) * n : (k + 2) * n] = I - 0.5 * h * A[k + 1]
            dyn[r, nz + k * m : nz + (k + 1) * m] = -0.5 * h * (Bh[k] + Bh[k + 1])
        bc0 = sp.hstack([sp.identity(n), sp.csr_matrix((n, nz + nu - n))])
        bc1 = sp.hstack([sp.csr_matrix((n, N * n)), sp.identity(n), sp.csr_matrix((n, nu))])
        C = sp.vstack([dyn, bc0, bc1]).tocsr()
        self.C, self.H = C, H
        K = sp.bmat([[H, C.T], [C, None]], format="csc")
        try:
            self._lu = splu(K)
        except RuntimeError as exc:
            raise InfeasibleOcpError(f"transcribed KKT matrix is singular: {exc}") from exc
        self._nc = C.shape[0]

    def _check_controllable(self, A, Bh, h):
        # Gramian of the implicit trapezoid recursion
        n = self.n
        I = np.eye(n)
        W = np.zeros((n, n))
        for k in range(self.N):
            L = I - 0.5 * h * A[k + 1]
            F = np.linalg.solve(L, I + 0.5 * h * A[k])
            Gk = np.linalg.solve(L, 0.5 * h * (Bh[k] + Bh[k + 1]))
            W = F @ W @ F.T + Gk @ Gk.T
        ev = np.linalg.eigvalsh(0.5 * (W + W.T))
        if not ev[0] > 1e-12 * max(ev[-1], np.finfo(float).tiny):
            raise InfeasibleOcpError(
                f"transcribed system is not controllable on the grid (Gramian eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})"
            )

    def solve(self, x, y) -> OcpSolution:
        n, N = self.n, self.N
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        d = np.zeros(self._nc)
        d[N * n : N * n + n] = x
        d[N * n + n :] = y
        rhs = np.concatenate([np.zeros(self.nz + self.nu), d])
        sol = self._lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise InfeasibleOcpError("KKT solve produced non-finite values")
        w = sol[: self.nz + self.nu]
        lam = sol[self.nz + self.nu :]
        r1 = self.H @ w + self.C.T @ lam
        r2 = self.C @ w - d
        z = w[: self.nz].reshape(N + 1, n)
        u = w[self.nz :].reshape(N, self.m)
        cost = 0.5 * float(w @ (self.H @ w))
        berr = max(float(np.max(np.abs(z[0] - x))), float(np.max(np.abs(z[-1] - y))))
        return OcpSolution(
            cost=max(cost, 0.0),
            times=self.times,
            z=z,
            u=u,
            kkt_residual=float(max(np.max(np.abs(r1)), np.max(np.abs(r2)))),
            boundary_error=berr,
        )


def solve_bvp_ocp(sys: LtvSystem, x, y, t0: float | None = None, t: float | None = None, grid_n: int = 512) -> OcpSolution:
    """Minimum of ``int (|u|^2 + z'Qz)/2`` over transfers from ``x`` at ``t0`` to ``y`` at ``t``."""
    t0 = sys.t0 if t0 is None else t0
    t = sys.t1 if t is None else t
    return DirectTranscription(sys, t0, t, grid_n).solve(x, y)


def extrapolated_cost(sys: LtvSystem, x, y, t0: float | None = None, t: float | None = None, grid_n: int = 512) -> float:
    """Richardson combination ``(4 c(2N) - c(N)) / 3`` of two transcription costs.

    The trapezoid transcription is second order, so this removes the leading
    error term.
    """
    c1 = solve_bvp_ocp(sys, x, y, t0, t, grid_n).cost
    c2 = solve_bvp_ocp(sys, x, y, t0, t, 2 * grid_n).cost
    return (4.0 * c2 - c1) / 3.0


def feedback_system(sys: LtvSystem, K1, t: float | None = None, t0: float | None = None) -> tuple[LtvSystem, np.ndarray]:
    """``(Ahat, B, 0)`` with ``Ahat = A - Bh Bh' Pi(., K1, t)``, and ``Pi(t0, K1, t)``.

    Used to check the cost relation between the state-penalized problem and
    the pure minimum-energy problem on the feedback-shifted pair.
    """
    t = sys.t1 if t is None else float(t)
    t0 = sys.t0 if t0 is None else float(t0)
    ric = solve_riccati(sys, K1, t, t0=t0, steps=4 * sys.steps_for(t0, t))
    Ahat = MatrixTrajectory.from_function(lambda s: sys.A(s) - sys.noise(s) @ ric(s), (sys.n, sys.n))
    fb = LtvSystem(Ahat, sys.B, MatrixTrajectory.constant(np.zeros((sys.n, sys.n))), t0, t, sys.steps_per_unit)
    return fb, ric.values[0]


# --- PDE residual --------------------------------------------------------------


def pde_residual(
    K: KernelEvaluator,
    sys: LtvSystem,
    t: float | None = None,
    x=None,
    y=None,
    h: float = 1e-3,
    relative: bool = False,
) -> float:
    """Finite-difference residual of the forward equation of the kernel in ``y``:

        d/dt k = -div_y(k A_t y) + <B_t B_t', Hess_y k> - (y' Q_t y / 2) k.

    Time derivatives use kernels rebuilt at ``t +- h`` with the same sweep
    settings; space steps are ``h * max(1, |y_i|)``. With ``relative=True``
    the residual is divided by ``k(t0, x, t, y)``.
    """
    t = K.t if t is None else float(t)
    n = sys.n
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if t - K.t0 < 10 * h:
        raise ValueError("t must be at least 10 h away from t0")
    per_octave = K.normalizer.family.per_octave
    Kt = K if abs(K.t - t) < 1e-15 else build_kernel(sys, t, K.t0, per_octave=per_octave, case=K.case_tag)
    Km = build_kernel(sys, t - h, K.t0, per_octave=per_octave, case=K.case_tag)
    Kp = build_kernel(sys, t + h, K.t0, per_octave=per_octave, case=K.case_tag)
    dt_k = (Kp(x, y) - Km(x, y)) / (2.0 * h)

    k0 = Kt(x, y)
    steps = h * np.maximum(1.0, np.abs(y))
    grad = np.empty(n)
    hess = np.empty((n, n))
    E = np.eye(n)
    for i in range(n):
        ei = steps[i] * E[i]
        kp, km = Kt(x, y + ei), Kt(x, y - ei)
        grad[i] = (kp - km) / (2.0 * steps[i])
        hess[i, i] = (kp - 2.0 * k0 + km) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = steps[j] * E[j]
            v = (Kt(x, y + ei + ej) - Kt(x, y + ei - ej) - Kt(x, y - ei + ej) + Kt(x, y - ei - ej)) / (
                4.0 * steps[i] * steps[j]
            )
            hess[i, j] = hess[j, i] = v
    A, Bt, Q = sys.A(t), sys.B(t), sys.Q(t)
    div = np.trace(A) * k0 + (A @ y) @ grad
    rhs = -div + np.sum((Bt @ Bt.T) * hess) - 0.5 * (y @ Q @ y) * k0
    r = abs(dt_k - rhs)
    return float(r / k0) if relative else float(r)


# --- Feynman-Kac -----------------------------------------------------------------


@dataclass(frozen=True)
class FkEstimate:
    mean: float
    std_error: float
    paths: int
    survival_mean: float
    survival_min: float
    seed: int
    dt: float


@dataclass(frozen=True)
class KilledPath:
    times: np.ndarray
    states: np.ndarray
    log_weights: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


def _step_count(span: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError("dt must be positive")
    N = int(round(span / dt))
    if N < 1 or abs(N * dt - span) > 1e-9 * max(1.0, span):
        raise ValueError(f"dt={dt} does not divide the interval length {span}")
    return N


def _generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)]))


def _em_batch(sys: LtvSystem, x0, t0, dt, N, paths, rng, seed, record=False):
    n, m = sys.n, sys.m
    X = np.broadcast_to(np.atleast_1d(np.asarray(x0, dtype=float)), (paths, n)).copy()
    logw = np.zeros(paths)
    sq = math.sqrt(2.0 * dt)
    hist = [X.copy()] if record else None
    whist = [logw.copy()] if record else None
    for k in range(N):
        s = t0 + k * dt
        A, Bt, Q = sys.A(s), sys.B(s), sys.Q(s)
        logw -= 0.5 * dt * np.einsum("pi,ij,pj->p", X, Q, X)
        dW = rng.standard_normal((paths, m))
        with np.errstate(over="ignore", invalid="ignore"):
            X = X + dt * (X @ A.T) + sq * (dW @ Bt.T)
        if not np.all(np.isfinite(X)):
            raise SimulationBlowupError(f"non-finite path values at step {k + 1} (seed {seed})", seed, k + 1)
        if record:
            hist.append(X.copy())
            whist.append(logw.copy())
    if record:
        return np.array(hist), np.array(whist)
    return X, logw


def simulate_killed_diffusion(
    sys: LtvSystem, x0, t0: float, t1: float, dt: float, seed: int, paths: int = 1
) -> KilledPath:
    """Euler-Maruyama paths with the cumulative survival weight ``exp(-int x'Qx/2)``.

    The weight uses the left-point rule, so it is nonincreasing whenever
    ``Q`` is positive semidefinite.
    """
    N = _step_count(t1 - t0, dt)
    states, logw = _em_batch(sys, x0, t0, dt, N, paths, _generator(seed, 0), seed, record=True)
    return KilledPath(t0 + dt * np.arange(N + 1), states, logw)


def feynman_kac(
    sys: LtvSystem,
    phi1: Callable[[np.ndarray], np.ndarray],
    t: float,
    x,
    t1: float,
    paths: int = 100_000,
    dt: float = 1e-3,
    seed: int = 0,
    batch: int = 25_000,
) -> FkEstimate:
    """Monte Carlo estimate of ``E[phi1(x_t1) exp(-int_t^t1 x'Qx/2) | x_t = x]``.

    ``phi1`` maps an array of shape ``(paths, n)`` to ``(paths,)``. Batch ``b``
    draws from the counter-based stream keyed by ``(seed, b)``, so results
    depend only on ``seed``, ``paths`` and ``batch``.
    """
    N = _step_count(t1 - t, dt)
    total = s1 = s2 = 0.0
    wsum, wmin = 0.0, 1.0
    b = 0
    done = 0
    while done < paths:
        p = min(batch, paths - done)
        X, logw = _em_batch(sys, x, t, dt, N, p, _generator(seed, b), seed)
        w = np.exp(logw)
        vals = w * np.asarray(phi1(X), dtype=float).reshape(p)
        s1 += float(np.sum(vals))
        s2 += float(np.sum(vals * vals))
        wsum += float(np.sum(w))
        wmin = min(wmin, float(np.min(w)))
        total += p
        done += p
        b += 1
    mean = s1 / total
    var = max(s2 / total - mean * mean, 0.0) * total / max(total - 1, 1)
    return FkEstimate(mean, math.sqrt(var / total), int(total), wsum / total, wmin, int(seed), float(dt))


# --- validation report --------------------------------------------------------------


@dataclass(frozen=True)
class ValidationRow:
    check: str
    configuration: str
    observed: float
    expected: float
    tolerance: float
    passed: bool

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def run_validation(
    sys: LtvSystem,
    seed: int = 0,
    points: int = 5,
    fk_paths: int = 20_000,
    fk_dt: float | None = None,
    grid_n: int = 512,
) -> list[ValidationRow]:
    """Run the oracle suite on ``sys`` over its full horizon.

    Checks: assumptions, Riccati cross-method agreement, distance vs the
    transcribed OCP, the cost relation for a random terminal weight, the PDE
    residual, Feynman-Kac vs the closed-form kernel mass, and (for the
    special cases) agreement with the closed-form kernel.
    """
    rng = np.random.default_rng(seed)
    t0, t1 = sys.t0, sys.t1
    n = sys.n
    rows: list[ValidationRow] = []

    rep = check_assumptions(sys)
    rows.append(ValidationRow("controllability", "full horizon", rep.gramian_min_eig, 0.0, 0.0, rep.controllable))

    K = build_kernel(sys)
    case = K.case_tag

    ric = solve_riccati(sys)
    ham = riccati_via_hamiltonian(sys)
    err = float(np.linalg.norm(ric.values[0] - ham))
    rows.append(ValidationRow("riccati_cross_method", f"tau={t0:g}", err, 0.0, 1e-7, err <= 1e-7))

    ocp = DirectTranscription(sys, t0, t1, grid_n)
    worst = 0.0
    for _ in range(points):
        x, y = rng.normal(size=n), rng.normal(size=n)
        d = squared_distance(K.M, x, y)
        worst = max(worst, _rel(ocp.solve(x, y).cost, d))
    rows.append(ValidationRow("distance_vs_bvp", f"grid_n={grid_n}, points={points}", worst, 0.0, 1e-4, worst <= 1e-4))

    G = rng.normal(size=(n, n))
    K1 = G @ G.T / n
    fb, PiK = feedback_system(sys, K1)
    x, y = rng.normal(size=n), rng.normal(size=n)
    eta = extrapolated_cost(sys, x, y, grid_n=grid_n)
    eta_hat = extrapolated_cost(fb, x, y, grid_n=grid_n)
    gap = float(abs(eta - (eta_hat + 0.5 * x @ PiK @ x - 0.5 * y @ K1 @ y)))
    rows.append(ValidationRow("cost_relation", f"random K1, extrapolated grid_n={grid_n}/{2 * grid_n}", gap, 0.0, 1e-5,
                              gap <= 1e-5))

    tm = t0 + 0.5 * (t1 - t0)
    Km = build_kernel(sys, tm)
    x, y = 0.5 * rng.normal(size=n), 0.5 * rng.normal(size=n)
    r = pde_residual(Km, sys, tm, x, y, 1e-3, relative=True)
    rows.append(ValidationRow("pde_residual", f"t={tm:g}, h=1e-3", r, 0.0, 1e-4, r <= 1e-4))

    dt = fk_dt if fk_dt is not None else (t1 - t0) / 1000
    x = 0.5 * rng.normal(size=n)
    est = feynman_kac(sys, lambda X: np.ones(X.shape[0]), t0, x, t1, paths=fk_paths, dt=dt, seed=seed)
    ref = K.mass(x)
    z = abs(est.mean - ref) / max(est.std_error, 1e-300)
    ok = z <= 3.0 or abs(est.mean - ref) <= 1e-12
    rows.append(ValidationRow("feynman_kac_mass", f"paths={fk_paths}, dt={dt:g}", est.mean, ref, 3.0 * est.std_error, ok))

    if case in ("heat", "diagonal", "linear"):
        params = {"D": 0.5 * np.diag(sys.Q.value)} if case == "diagonal" else {"sys": sys}
        worst = 0.0
        for _ in range(points):
            x, y = rng.normal(size=n), rng.normal(size=n)
            ref = closed_form_kernel(case, params, t0, x, t1, y)
            worst = max(worst, float(_rel(K(x, y), ref)))
        rows.append(ValidationRow(f"closed_form_{case}", f"points={points}", worst, 0.0, 1e-6, worst <= 1e-6))
    return rows


def validation_table(rows: Sequence[ValidationRow]) -> tuple[list[str], list[list]]:
    cols = ["check", "configuration", "observed", "expected", "tolerance", "verdict"]
    return cols, [[r.check, r.configuration, r.observed, r.expected, r.tolerance, r.verdict] for r in rows]
