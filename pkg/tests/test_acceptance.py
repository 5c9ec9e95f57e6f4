"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
when output capture is on.
"""

import math
import time

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from lqbridge.kernel import (
    build_kernel,
    diagonal_blocks,
    diagonal_kernel,
    forward_family,
    gaussian_integral,
    heat_kernel,
    linear_kernel,
    squared_distance,
)
from lqbridge.ltv_system import LtvSystem, MatrixTrajectory, check_assumptions, diagonal_case, heat, time_varying
from lqbridge.oracle import (
    DirectTranscription,
    extrapolated_cost,
    feedback_system,
    feynman_kac,
    pde_residual,
)
from lqbridge.riccati import riccati_via_hamiltonian, solve_riccati
from lqbridge.sinkhorn import (
    GaussianMixture,
    GridFunction,
    KernelCache,
    gaps_monotone,
    optimal_control,
    propagate_potentials,
    sinkhorn_solve,
    transform_backward,
)

from conftest import random_system

# pinned tolerances and budgets
TOL_HEAT = 1e-8
TIME_HEAT = 10.0
TOL_LINEAR = 1e-6
TOL_DIAG = 1e-6
TOL_DIAG_BLOCKS = 1e-8
TOL_PREFACTOR = 1e-6
PDE_H = (4e-3, 2e-3, 1e-3)
PDE_RATIO = (3.5, 4.5)
TOL_BVP = 1e-4
BVP_GRID = 512
TOL_COST_RELATION = 1e-5
TOL_RICCATI = 1e-7
FK_PATHS = 100_000
FK_DT = 1e-3
FK_SE = 3.0
TIME_FK = 60.0
TOL_SINKHORN = 1e-6
SINKHORN_MAX_ITER = 500
TOL_GAUGE = 1e-12
TIME_SINKHORN = 120.0
DELTA_OFFSETS = (1e-1, 1e-2, 1e-3)
TOL_GRADIENT = 1e-6

SEED = 20261018


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


def rel(a, b):
    return abs(a - b) / abs(b)


def test_01_heat_reduction(report):
    rng = np.random.default_rng(SEED + 1)
    start = time.perf_counter()
    worst = 0.0
    for n in (1, 2, 3):
        fam = forward_family(heat(n, horizon=(0.0, 2.0)), 2.0)
        for _ in range(100):
            s = rng.uniform(0.1, 2.0)
            x, y = rng.normal(size=n), rng.normal(size=n)
            K = fam.evaluator(s, case="general")
            worst = max(worst, rel(K(x, y), heat_kernel(s, x, y)))
    elapsed = time.perf_counter() - start
    ok = worst <= TOL_HEAT and elapsed < TIME_HEAT
    assert report(1, ok, f"max rel err {worst:.2e} (tol {TOL_HEAT:g}), {elapsed:.1f} s (limit {TIME_HEAT:g} s)")


def test_02_linear_reduction(report):
    rng = np.random.default_rng(SEED + 2)
    sys = random_system(rng, 2, m=1, killing=False)
    assert check_assumptions(sys).controllable

    def f(s, v):
        Phi, W = v[:4].reshape(2, 2), v[4:].reshape(2, 2)
        A, B = sys.A(s), sys.B(s)
        return np.concatenate([(A @ Phi).ravel(), (A @ W + W @ A.T + B @ B.T).ravel()])

    v = solve_ivp(f, (0.0, 1.0), np.concatenate([np.eye(2).ravel(), np.zeros(4)]), method="DOP853",
                  rtol=1e-12, atol=1e-14).y[:, -1]
    Phi, Gamma = v[:4].reshape(2, 2), v[4:].reshape(2, 2)
    K = build_kernel(sys)
    worst = 0.0
    for _ in range(100):
        x, y = rng.normal(size=2), rng.normal(size=2)
        worst = max(worst, rel(K(x, y), linear_kernel(1.0, Phi, Gamma, x, y)))
    matched = abs(math.expm1(K.log_c_matched - K.log_c))
    ok = worst <= TOL_LINEAR
    assert report(2, ok, f"max rel err {worst:.2e} (tol {TOL_LINEAR:g}); matched-vs-normalized c {matched:.1e}")


def test_03_diagonal_reduction(report):
    rng = np.random.default_rng(SEED + 3)
    D = np.array([0.25, 1.0])
    fam = forward_family(diagonal_case(D, horizon=(0.0, 2.0)), 2.0)
    worst = worst_blocks = 0.0
    for _ in range(100):
        s = rng.uniform(0.1, 2.0)
        x, y = rng.normal(size=2), rng.normal(size=2)
        K = fam.evaluator(s, case="general")
        worst = max(worst, rel(K(x, y), diagonal_kernel(s, D, x, y)))
        ref = diagonal_blocks(D, s)
        got = (K.M.M11, K.M.M12, K.M.M22)
        worst_blocks = max(worst_blocks, max(float(np.max(np.abs(a - b))) for a, b in zip(got, ref)))
    ok = worst <= TOL_DIAG and worst_blocks <= TOL_DIAG_BLOCKS
    assert report(3, ok, f"kernel rel err {worst:.2e} (tol {TOL_DIAG:g}); "
                         f"block err {worst_blocks:.2e} (tol {TOL_DIAG_BLOCKS:g})")


def test_04_prefactor_identity(report):
    D = np.array([0.25, 1.0])
    omega = 2.0 * np.sqrt(D)
    form_a = float(np.prod(np.sqrt(omega / (4 * math.pi))))
    form_b = (2 * math.pi) ** -1.0 * float(np.prod(D)) ** 0.25
    fam = forward_family(diagonal_case(D, horizon=(0.0, 2.0)), 2.0)
    extracted = [fam.evaluator(s, case="diagonal").a for s in (0.5, 1.0, 2.0)]
    err = max(max(abs(a - form_a), abs(a - form_b)) for a in extracted)
    ok = err <= TOL_PREFACTOR and abs(form_a - form_b) <= 1e-15
    assert report(4, ok, f"a = {extracted[1]:.10f}, forms {form_a:.10f} / {form_b:.10f}, "
                         f"max err {err:.2e} (tol {TOL_PREFACTOR:g})")


def test_05_pde_residual_order(report):
    rng = np.random.default_rng(SEED + 5)
    sys = time_varying(horizon=(0.0, 2.0))
    ratios = []
    for _ in range(20):
        t = rng.uniform(0.3, 1.5)
        x, y = 0.5 * rng.normal(size=2), 0.5 * rng.normal(size=2)
        Kt = build_kernel(sys, t)
        r = [pde_residual(Kt, sys, t, x, y, h) for h in PDE_H]
        ratios += [r[0] / r[1], r[1] / r[2]]
    ratios = np.array(ratios)
    ok = bool(np.all((ratios >= PDE_RATIO[0]) & (ratios <= PDE_RATIO[1])))
    assert report(5, ok, f"ratios in [{ratios.min():.3f}, {ratios.max():.3f}] (required {list(PDE_RATIO)}), "
                         f"{ratios.size} ratios")


def _scalar_system():
    A = MatrixTrajectory.from_function(lambda t: [[0.3 * math.sin(t)]], (1, 1))
    Q = MatrixTrajectory.from_function(lambda t: [[1.0 + 0.5 * math.cos(t)]], (1, 1))
    return LtvSystem(A, MatrixTrajectory.constant([[1.0]]), Q, 0.0, 1.0)


def test_06_distance_oracle(report):
    rng = np.random.default_rng(SEED + 6)
    worst = 0.0
    for sys in (_scalar_system(), time_varying()):
        K = build_kernel(sys)
        ocp = DirectTranscription(sys, sys.t0, sys.t1, BVP_GRID)
        for _ in range(20):
            x, y = rng.normal(size=sys.n), rng.normal(size=sys.n)
            worst = max(worst, rel(ocp.solve(x, y).cost, squared_distance(K.M, x, y)))
    sys = time_varying()
    ocp = DirectTranscription(sys, 0.0, 1.0, BVP_GRID)
    gap = raw_gap = 0.0
    for _ in range(5):
        G = rng.normal(size=(2, 2))
        K1 = G @ G.T / 2
        fb, Pi = feedback_system(sys, K1)
        x, y = rng.normal(size=2), rng.normal(size=2)
        shift = 0.5 * x @ Pi @ x - 0.5 * y @ K1 @ y
        gap = max(gap, abs(extrapolated_cost(sys, x, y, grid_n=BVP_GRID)
                           - extrapolated_cost(fb, x, y, grid_n=BVP_GRID) - shift))
        raw_gap = max(raw_gap, abs(ocp.solve(x, y).cost - solve_fb(fb, x, y) - shift))
    ok = worst <= TOL_BVP and gap <= TOL_COST_RELATION
    assert report(6, ok, f"distance rel err {worst:.2e} (tol {TOL_BVP:g}); cost relation {gap:.2e} "
                         f"(tol {TOL_COST_RELATION:g}, extrapolated {BVP_GRID}/{2 * BVP_GRID}; "
                         f"raw {BVP_GRID}: {raw_gap:.2e})")


def solve_fb(fb, x, y):
    return DirectTranscription(fb, fb.t0, fb.t1, BVP_GRID).solve(x, y).cost


def test_07_riccati_cross_method(report):
    rng = np.random.default_rng(SEED + 7)
    worst = 0.0
    for k in range(10):
        n = 1 + k % 4
        sys = random_system(rng, n, m=int(rng.integers(1, n + 1)))
        G = rng.normal(size=(n, n))
        K1 = G @ G.T / n
        worst = max(worst, float(np.linalg.norm(solve_riccati(sys, K1).values[0] - riccati_via_hamiltonian(sys, K1))))
    ok = worst <= TOL_RICCATI
    assert report(7, ok, f"max Frobenius gap {worst:.2e} (tol {TOL_RICCATI:g}) over 10 systems, n <= 4")


def test_08_feynman_kac(report):
    sys = diagonal_case([0.25])
    K = build_kernel(sys)

    def phi1(Y):
        return np.exp(-0.5 * (Y[:, 0] - 0.5) ** 2) + 0.5

    ys = np.linspace(-14.0, 14.0, 8001)
    w = np.full(ys.size, ys[1] - ys[0])
    w[[0, -1]] *= 0.5
    start = time.perf_counter()
    zs = []
    for k, x in enumerate((-1.0, -0.5, 0.0, 0.5, 1.0)):
        ref = float(np.sum(K(np.full((ys.size, 1), x), ys[:, None]) * phi1(ys[:, None]) * w))
        est = feynman_kac(sys, phi1, 0.0, [x], 1.0, paths=FK_PATHS, dt=FK_DT, seed=SEED + k)
        zs.append(abs(est.mean - ref) / est.std_error)
    elapsed = time.perf_counter() - start
    ok = max(zs) <= FK_SE and elapsed < TIME_FK
    assert report(8, ok, f"|z| max {max(zs):.2f} (limit {FK_SE:g}), z = {[round(z, 2) for z in zs]}, "
                         f"{elapsed:.1f} s (limit {TIME_FK:g} s)")


def test_09_sinkhorn_bridge(report):
    sys = diagonal_case([0.25])
    rho0 = GaussianMixture([0.5, 0.5], [[-1.5], [1.5]], [[[0.25]], [[0.25]]])
    rho1 = GaussianMixture([0.3, 0.7], [[-0.5], [2.5]], [[[0.2]], [[0.4]]])
    start = time.perf_counter()
    cache = KernelCache(sys)
    st = sinkhorn_solve(cache(0.0, 1.0), rho0, rho1, tol=1e-9, max_iter=SINKHORN_MAX_ITER)
    g = st.gauge(10.0)
    gauge_err = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        a = propagate_potentials(cache, st, t)
        b = propagate_potentials(cache, g, t)
        ra = GridFunction(st.grid, a[0].log_values + a[1].log_values).values
        rb = GridFunction(st.grid, b[0].log_values + b[1].log_values).values
        gauge_err = max(gauge_err, float(np.max(np.abs(ra - rb))))
    elapsed = time.perf_counter() - start
    res = max(st.residuals)
    mono = gaps_monotone(st.hilbert_gaps)
    ok = (st.converged and res <= TOL_SINKHORN and st.iteration <= SINKHORN_MAX_ITER and mono
          and gauge_err <= TOL_GAUGE and elapsed < TIME_SINKHORN)
    assert report(9, ok, f"{st.iteration} iterations, residual {res:.2e} (tol {TOL_SINKHORN:g}), "
                         f"gaps monotone {mono}, gauge err {gauge_err:.1e} (tol {TOL_GAUGE:g}), "
                         f"{elapsed:.1f} s (limit {TIME_SINKHORN:g} s)")


def test_10_delta_limit(report):
    sys = time_varying()
    F = np.array([[2.0, 0.5], [0.5, 1.0]])  # bump f(y) = exp(-y'Fy/2)
    rng = np.random.default_rng(SEED + 10)
    xs = 0.5 * rng.normal(size=(5, 2))
    kernels = [build_kernel(sys, s) for s in DELTA_OFFSETS]
    table = []
    for x in xs:
        errs = []
        for K in kernels:
            M = K.M
            val = K.c * math.exp(-0.5 * x @ M.M11 @ x) * gaussian_integral(M.M22 + F, -M.M21 @ x)
            errs.append(abs(val - math.exp(-0.5 * x @ F @ x)))
        table.append(errs)
    table = np.array(table)
    ok = bool(np.all(np.diff(table, axis=1) < 0))
    assert report(10, ok, "errors per offset (max over x): "
                          + ", ".join(f"{s:g}: {e:.2e}" for s, e in zip(DELTA_OFFSETS, table.max(axis=0))))


def test_11_mixture_gradient(report):
    rng = np.random.default_rng(SEED + 11)
    sys = diagonal_case([0.25, 1.0])
    K = build_kernel(sys)
    phi1 = GaussianMixture([0.2, 0.5, 0.3], [[-1.0, 0.5], [0.8, -0.4], [0.0, 1.5]],
                           [[[0.5, 0.1], [0.1, 0.3]], [[0.4, 0.0], [0.0, 0.6]], [[0.3, -0.1], [-0.1, 0.5]]]).as_potential()
    phi = transform_backward(K, phi1)  # phi(t0, .) in closed form
    X = rng.normal(size=(50, 2))
    G = phi.grad_log(X)
    worst = 0.0
    for p in range(50):
        fd = np.empty(2)
        for i in range(2):
            e = np.zeros(2)
            e[i] = 1e-5 * max(1.0, abs(X[p, i]))
            fd[i] = (phi.log(X[p] + e) - phi.log(X[p] - e))[0] / (2 * e[i])
        worst = max(worst, float(np.linalg.norm(G[p] - fd) / np.linalg.norm(G[p])))
    u = optimal_control(KernelCache(sys, base=K), phi, 0.0, X)
    ok = worst <= TOL_GRADIENT and np.allclose(u, 2.0 * G, rtol=0, atol=1e-15)
    assert report(11, ok, f"max rel gradient err {worst:.2e} (tol {TOL_GRADIENT:g}) on 50 points")
