import math

import numpy as np
import pytest

from lqbridge.kernel import build_kernel, squared_distance
from lqbridge.ltv_system import LtvSystem, MatrixTrajectory, diagonal_case, heat, time_varying
from lqbridge.oracle import (
    DirectTranscription,
    InfeasibleOcpError,
    SimulationBlowupError,
    feedback_system,
    feynman_kac,
    pde_residual,
    run_validation,
    simulate_killed_diffusion,
    solve_bvp_ocp,
)


def const_system(A, B, Q, horizon=(0.0, 1.0)):
    c = MatrixTrajectory.constant
    return LtvSystem(c(A), c(B), c(Q), *horizon)


def test_bvp_heat_and_diagonal():
    assert abs(solve_bvp_ocp(heat(1), [0.0], [1.0]).cost - 0.25) < 1e-4
    assert abs(solve_bvp_ocp(diagonal_case([0.25]), [0.0], [1.0]).cost - 0.3282588214) < 1e-4
    assert solve_bvp_ocp(diagonal_case([0.25]), [0.0], [0.0]).cost == pytest.approx(0.0, abs=1e-14)


def test_bvp_meets_boundary_conditions():
    sol = solve_bvp_ocp(time_varying(), [0.3, -0.2], [1.0, 0.4], grid_n=128)
    assert np.max(np.abs(sol.z[0] - [0.3, -0.2])) <= 1e-10
    assert np.max(np.abs(sol.z[-1] - [1.0, 0.4])) <= 1e-10


def test_bvp_second_order_convergence():
    sys = time_varying()
    K = build_kernel(sys)
    x, y = np.array([0.5, -0.3]), np.array([-0.2, 0.9])
    ref = squared_distance(K.M, x, y)
    e = [abs(solve_bvp_ocp(sys, x, y, grid_n=N).cost - ref) for N in (64, 128)]
    assert 3.0 < e[0] / e[1] < 5.0


def test_uncontrollable_transfer_is_infeasible():
    sys = const_system(np.zeros((2, 2)), [[1.0], [0.0]], np.zeros((2, 2)))
    with pytest.raises(InfeasibleOcpError):
        DirectTranscription(sys, 0.0, 1.0, 64)


def test_cost_relation_with_terminal_weight():
    sys = time_varying()
    K1 = np.array([[0.8, 0.2], [0.2, 0.5]])
    fb, Pi = feedback_system(sys, K1)
    x, y = np.array([0.4, -0.6]), np.array([0.1, 0.7])
    eta = solve_bvp_ocp(sys, x, y).cost
    eta_hat = solve_bvp_ocp(fb, x, y).cost
    assert abs(eta - (eta_hat + 0.5 * x @ Pi @ x - 0.5 * y @ K1 @ y)) < 1e-5


def test_pde_residual_heat_second_order():
    K = build_kernel(heat(1), 0.5)
    r = [pde_residual(K, heat(1), 0.5, [0.1], [0.6], h) for h in (4e-3, 2e-3)]
    assert 3.5 < r[0] / r[1] < 4.5


def test_pde_residual_small_for_general_system():
    sys = time_varying()
    K = build_kernel(sys, 0.6)
    assert pde_residual(K, sys, 0.6, [0.2, -0.1], [0.3, 0.2], 1e-3, relative=True) < 1e-4


def test_fk_without_killing_and_unit_payoff_is_exact():
    est = feynman_kac(heat(1), lambda X: np.ones(X.shape[0]), 0.0, [0.3], 1.0, paths=1000, dt=0.01)
    assert est.mean == 1.0 and est.std_error == 0.0


def test_fk_heat_gaussian_payoff_within_three_errors():
    # E exp(-Y^2/2), Y ~ N(x, 2s): (1 + 2s)^(-1/2) exp(-x^2 / (2(1 + 2s)))
    x, s = 0.4, 1.0
    est = feynman_kac(heat(1), lambda X: np.exp(-0.5 * X[:, 0] ** 2), 0.0, [x], s, paths=20_000, dt=0.05, seed=7)
    ref = (1 + 2 * s) ** -0.5 * math.exp(-x * x / (2 * (1 + 2 * s)))
    assert abs(est.mean - ref) < 3 * est.std_error


def test_fk_mass_diagonal():
    sys = diagonal_case([0.25])
    est = feynman_kac(sys, lambda X: np.ones(X.shape[0]), 0.0, [0.5], 1.0, paths=20_000, dt=1e-2, seed=1)
    ref = build_kernel(sys).mass([0.5])
    assert abs(est.mean - ref) < 3 * est.std_error + 5e-3
    assert 0 < est.survival_min <= est.survival_mean <= 1


def test_killed_paths_deterministic_and_weights_monotone():
    sys = diagonal_case([0.25, 1.0])
    a = simulate_killed_diffusion(sys, [0.5, -0.5], 0.0, 1.0, 0.01, seed=11, paths=50)
    b = simulate_killed_diffusion(sys, [0.5, -0.5], 0.0, 1.0, 0.01, seed=11, paths=50)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.log_weights, b.log_weights)
    assert np.all(np.diff(a.weights, axis=0) <= 0)
    assert a.states.shape == (101, 50, 2)


def test_fk_reproducible_per_seed():
    phi = lambda X: np.exp(-X[:, 0] ** 2)
    a = feynman_kac(diagonal_case([0.25]), phi, 0.0, [0.1], 1.0, paths=3000, dt=0.01, seed=5, batch=1000)
    b = feynman_kac(diagonal_case([0.25]), phi, 0.0, [0.1], 1.0, paths=3000, dt=0.01, seed=5, batch=1000)
    c = feynman_kac(diagonal_case([0.25]), phi, 0.0, [0.1], 1.0, paths=3000, dt=0.01, seed=6, batch=1000)
    assert a.mean == b.mean and a.mean != c.mean


def test_step_must_divide_interval():
    with pytest.raises(ValueError):
        simulate_killed_diffusion(heat(1), [0.0], 0.0, 1.0, 0.3, seed=0)


def test_blow_up_reports_seed_and_step():
    sys = const_system([[1e200]], [[1.0]], [[0.0]])
    with pytest.raises(SimulationBlowupError) as info:
        simulate_killed_diffusion(sys, [1e200], 0.0, 1.0, 0.5, seed=3, paths=2)
    assert info.value.seed == 3 and info.value.step == 1


def test_validation_report_passes_for_diagonal():
    rows = run_validation(diagonal_case([0.25]), seed=0, points=3, fk_paths=5000)
    bad = [r.check for r in rows if not r.passed]
    assert not bad
