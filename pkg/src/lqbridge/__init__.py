"""Closed-form kernels of linear diffusions with quadratic killing, and
Schrodinger bridges built on them."""

__version__ = "0.1.0"

from .kernel import (
    DistanceForm,
    KernelEvaluator,
    build_kernel,
    closed_form_kernel,
    distance_form,
    gaussian_integral,
    kernel_eval,
    squared_distance,
)
from .ltv_system import LtvSystem, MatrixTrajectory, check_assumptions, controllability_gramian, state_transition
from .riccati import closed_loop, riccati_via_hamiltonian, solve_riccati

__all__ = [
    "DistanceForm",
    "KernelEvaluator",
    "LtvSystem",
    "MatrixTrajectory",
    "build_kernel",
    "check_assumptions",
    "closed_form_kernel",
    "closed_loop",
    "controllability_gramian",
    "distance_form",
    "gaussian_integral",
    "kernel_eval",
    "riccati_via_hamiltonian",
    "solve_riccati",
    "squared_distance",
    "state_transition",
]
