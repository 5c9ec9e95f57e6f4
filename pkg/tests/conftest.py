import numpy as np
import pytest

from lqbridge.ltv_system import LtvSystem, MatrixTrajectory


def random_system(rng, n, m=None, killing=True, horizon=(0.0, 1.0), scale=0.5):
    """Smooth random time-varying system with PSD killing (or none)."""
    m = n if m is None else m
    A0, A1 = scale * rng.normal(size=(n, n)), scale * rng.normal(size=(n, n))
    B0, B1 = rng.normal(size=(n, m)), 0.3 * rng.normal(size=(n, m))
    C = rng.normal(size=(n, n)) / np.sqrt(n)
    w = rng.uniform(0.5, 2.0)
    A = MatrixTrajectory.from_function(lambda t: A0 + A1 * np.sin(w * t), (n, n), "A")
    B = MatrixTrajectory.from_function(lambda t: B0 + B1 * np.cos(t), (n, m), "B")
    if killing:
        Q = MatrixTrajectory.from_function(lambda t: (1.0 + 0.5 * np.sin(t)) * (C @ C.T) + 0.1 * np.eye(n), (n, n), "Q")
    else:
        Q = MatrixTrajectory.constant(np.zeros((n, n)))
    return LtvSystem(A, B, Q, *horizon)


@pytest.fixture
def rng():
    return np.random.default_rng(20261018)
