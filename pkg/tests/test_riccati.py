import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from lqbridge.ltv_system import LtvSystem, MatrixTrajectory, diagonal_case, heat, linear_example, time_varying
from lqbridge.riccati import (
    ConjugatePointError,
    FiniteEscapeError,
    closed_loop,
    distance_via_terminal_weight,
    hamiltonian_transition,
    riccati_via_hamiltonian,
    scalar_riccati_reference,
    solve_riccati,
)
from lqbridge.kernel import build_kernel, squared_distance

from conftest import random_system


def scalar(a, b, q, horizon=(0.0, 1.0)):
    c = MatrixTrajectory.constant
    return LtvSystem(c([[a]]), c([[b]]), c([[q]]), *horizon)


def test_zero_killing_gives_zero_solution():
    ric = solve_riccati(linear_example())
    assert np.array_equal(ric.values, np.zeros_like(ric.values))


def test_diagonal_value_at_start():
    ric = solve_riccati(diagonal_case([0.25]))
    assert abs(ric.values[0][0, 0] - 0.5 * math.tanh(1.0)) < 1e-10


@pytest.mark.parametrize("a,b,q,k1", [(0.3, 1.0, 2.0, 0.0), (-0.5, 0.7, 0.4, 1.5), (1.0, 1.2, 0.0, 0.3)])
def test_scalar_constant_matches_closed_form(a, b, q, k1):
    # sigma-form: dk/dsigma = 2 a k - 2 b^2 k^2 + q  (noise = 2 b^2)
    ric = solve_riccati(scalar(a, b, q), [[k1]])
    ref = scalar_riccati_reference(a, math.sqrt(2.0) * b, q, k1, 1.0)
    assert abs(ric.values[0][0, 0] - ref) / max(1.0, abs(ref)) < 1e-8


def test_time_varying_matches_dense_reference():
    sys = time_varying()
    K1 = np.array([[0.5, 0.1], [0.1, 0.2]])

    def f(s, k):
        tau = 1.0 - s
        K = k.reshape(2, 2)
        A, Q = sys.A(tau), sys.Q(tau)
        return (A.T @ K + K @ A - K @ sys.noise(tau) @ K + Q).ravel()

    ref = solve_ivp(f, (0, 1), K1.ravel(), method="DOP853", rtol=1e-13, atol=1e-14).y[:, -1].reshape(2, 2)
    ric = solve_riccati(sys, K1)
    assert np.max(np.abs(ric.values[0] - ref)) / np.max(np.abs(ref)) < 1e-8


def test_symmetric_at_every_node_and_psd():
    ric = solve_riccati(time_varying(), np.eye(2))
    assert np.array_equal(ric.values, np.swapaxes(ric.values, 1, 2))
    assert ric.psd_ok and ric.min_eig > 0


def test_hermite_reconstruction_between_nodes():
    sys = diagonal_case([0.25])
    ric = solve_riccati(sys)
    for tau in (0.123, 0.5001, 0.9):
        assert abs(ric(tau)[0, 0] - 0.5 * math.tanh(1.0 - tau)) < 1e-9


def test_finite_escape_is_reported():
    # dk/dsigma = -2 k^2 from k = -10 leaves the real line near sigma = 0.05
    with pytest.raises(FiniteEscapeError) as info:
        solve_riccati(scalar(0.0, 1.0, 0.0), [[-10.0]], steps=4096)
    assert 0.94 < info.value.time < 0.96


def test_conjugate_point_is_reported():
    # Psi11 + Psi12 K1 = 1 + 2 sigma K1 vanishes at K1 = -1/2, sigma = 1
    with pytest.raises(ConjugatePointError):
        riccati_via_hamiltonian(scalar(0.0, 1.0, 0.0), [[-0.5]])


def test_hamiltonian_transition_values():
    sys = diagonal_case([0.25])
    assert np.array_equal(hamiltonian_transition(sys, 1.0, 1.0).Psi, np.eye(2))
    ht = hamiltonian_transition(sys, 1.0, 0.0)
    assert abs(ht.Psi[1, 1] - math.cosh(1.0)) < 1e-10
    assert ht.symplectic_defect() < 1e-10


def test_hamiltonian_at_terminal_time_returns_weight():
    K1 = np.array([[1.0, 0.2], [0.2, 0.5]])
    assert np.allclose(riccati_via_hamiltonian(time_varying(), K1, tau=1.0), K1, atol=0)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_cross_method_agreement(seed, n):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, n)
    G = rng.normal(size=(n, n))
    K1 = G @ G.T / n
    a = solve_riccati(sys, K1).values[0]
    b = riccati_via_hamiltonian(sys, K1)
    assert np.linalg.norm(a - b) < 1e-7


def test_closed_loop_reduces_without_killing():
    sys = linear_example()
    cl = closed_loop(sys)
    from lqbridge.ltv_system import transition_and_gramian
    Phi, W = transition_and_gramian(sys.A, sys.noise, 0.0, 1.0, sys.steps_for(0, 1))
    assert np.max(np.abs(cl.Phi_hat - Phi)) < 1e-13
    assert np.max(np.abs(cl.Gamma_hat - W)) < 1e-13
    assert np.array_equal(cl.Pi0, np.zeros((2, 2)))


def test_closed_loop_diagonal_values():
    cl = closed_loop(diagonal_case([0.25]))
    assert abs(cl.Phi_hat[0, 0] - 1.0 / math.cosh(1.0)) < 1e-9
    assert abs(1.0 / cl.Gamma_hat[0, 0] - 0.5 / math.tanh(1.0)) < 1e-9


def test_closed_loop_heat_gramian():
    cl = closed_loop(heat(2))
    assert np.allclose(cl.Gamma_hat, 2.0 * np.eye(2), atol=1e-12)


@pytest.mark.parametrize("scale", [0.0, 0.5, 2.0])
def test_distance_independent_of_terminal_weight(scale):
    sys = time_varying()
    K = build_kernel(sys)
    x, y = np.array([0.3, -1.0]), np.array([1.0, 0.5])
    K1 = scale * np.array([[1.0, 0.3], [0.3, 0.8]])
    assert abs(distance_via_terminal_weight(sys, K1, x, y) - squared_distance(K.M, x, y)) < 1e-6


def test_csv_dump(tmp_path):
    ric = solve_riccati(diagonal_case([0.25, 1.0]))
    path = ric.to_csv(tmp_path / "pi.csv")
    rows = path.read_text().strip().splitlines()
    assert len(rows) == ric.grid.size + 1
