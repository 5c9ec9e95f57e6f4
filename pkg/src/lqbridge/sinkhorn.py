"""Schrodinger bridges between non-Gaussian endpoints by the dynamic Sinkhorn recursion.

Conventions. ``kappa(t0, x, t1, y)`` is the kernel from :mod:`lqbridge.kernel`.

* forward transform:  ``(T01 f)(y) = int kappa(t0, x, t1, y) f(x) dx``
* backward transform: ``(T10 g)(x) = int kappa(t0, x, t1, y) g(y) dy``

The backward transform is the Feynman-Kac expectation of ``g(x_t1)`` with
survival weight, started from ``x`` at ``t0``. One Sinkhorn sweep is

    phihat0 -> phihat1 = T01 phihat0 -> phi1 = rho1 / phihat1
            -> phi0 = T10 phi1 -> phihat0 = rho0 / phi0.

Grid potentials live in the log domain throughout.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from .kernel import LOG_2PI, DomainError, KernelEvaluator, build_kernel
from .ltv_system import LtvSystem

TAIL_TOL = 1e-6
KERNEL_MARGIN = 6.0
SUPPORT_LEVEL = 1e-6
MAX_SPACING_RATIO = 1.0
SUPPORT_SD = 5.3
RATIO_FLOOR = 1e-300
LOG_RATIO_FLOOR = math.log(RATIO_FLOOR)


class TruncationError(RuntimeError):
    """The grid box cuts off a non-negligible part of the kernel mass."""


class ResolutionError(TruncationError):
    """Grid spacing is too coarse for the kernel's conditional spread."""


class SinkhornUnderflowError(FloatingPointError):
    """A ratio step divided by a vanishing transform value."""


class PositivityError(ValueError):
    """A potential that must be positive vanished at an evaluation point."""


class HilbertGapWarning(UserWarning):
    """Hilbert-metric gaps increased after the burn-in window."""


# --- grids --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Grid:
    """Axis-aligned tensor grid with trapezoid weights."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("grid axes must be increasing 1-D arrays with at least two points")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def box(cls, lower, upper, points) -> "Grid":
        lower, upper = np.atleast_1d(lower), np.atleast_1d(upper)
        points = np.broadcast_to(np.atleast_1d(points), lower.shape)
        return cls(tuple(np.linspace(lo, hi, int(p)) for lo, hi, p in zip(lower, upper, points)))

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def weights(self) -> np.ndarray:
        ws = []
        for a in self.axes:
            d = np.diff(a)
            w = np.zeros(a.size)
            w[:-1] += 0.5 * d
            w[1:] += 0.5 * d
            ws.append(w)
        out = ws[0]
        for w in ws[1:]:
            out = np.multiply.outer(out, w)
        return out.ravel()

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.lower) & (X <= self.upper), axis=-1)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Positive function sampled on a grid, stored as ``log`` values."""

    grid: Grid
    log_values: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.log_values, dtype=float).reshape(self.grid.size)
        if np.any(np.isnan(lv)) or np.any(lv == np.inf):
            raise ValueError("log values must be finite or -inf")
        object.__setattr__(self, "log_values", lv)

    @classmethod
    def from_values(cls, grid: Grid, values) -> "GridFunction":
        v = np.asarray(values, dtype=float).reshape(grid.size)
        if np.any(v < 0):
            raise ValueError("grid values must be nonnegative")
        with np.errstate(divide="ignore"):
            return cls(grid, np.log(v))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def mass(self) -> float:
        return float(np.exp(logsumexp(self.log_values + self.grid.log_weights)))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.exp(self.log_values + self.grid.log_weights - logsumexp(self.log_values + self.grid.log_weights))
        X = self.grid.points
        mu = p @ X
        D = X - mu
        return mu, (D * p[:, None]).T @ D

    def log(self, X) -> np.ndarray:
        """Linear interpolation of the log values (extrapolation outside the box is refused)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        interp = RegularGridInterpolator(self.grid.axes, self.log_values.reshape(self.grid.shape), bounds_error=True)
        return interp(X)

    def __call__(self, X) -> np.ndarray:
        return np.exp(self.log(X))

    def scaled(self, c: float) -> "GridFunction":
        return GridFunction(self.grid, self.log_values + math.log(c))


# --- Gaussian mixtures and exp-quadratic potentials -----------------------------


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture density ``sum_i w_i N(m_i, S_i)`` with positive weights summing to one."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        m = m.reshape(w.size, -1)
        n = m.shape[1]
        S = np.asarray(self.covs, dtype=float).reshape(w.size, n, n)
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        for Si in S:
            np.linalg.cholesky(Si)
        object.__setattr__(self, "weights", w / w.sum())
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", 0.5 * (S + np.swapaxes(S, -1, -2)))

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(np.ones(1), mean[None], np.atleast_2d(np.asarray(cov, dtype=float))[None])

    @property
    def n(self) -> int:
        return self.means.shape[1]

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        mu = self.weights @ self.means
        D = self.means - mu
        cov = np.einsum("k,kij->ij", self.weights, self.covs) + (D * self.weights[:, None]).T @ D
        return mu, cov

    def as_potential(self) -> "MixturePotential":
        Pm = np.linalg.inv(self.covs)
        h = np.einsum("kij,kj->ki", Pm, self.means)
        _, logdet = np.linalg.slogdet(self.covs)
        g = np.log(self.weights) - 0.5 * self.n * LOG_2PI - 0.5 * logdet - 0.5 * np.einsum("ki,ki->k", self.means, h)
        return MixturePotential(g, Pm, h)

    def log_pdf(self, X) -> np.ndarray:
        return self.as_potential().log(X)

    def pdf(self, X) -> np.ndarray:
        return np.exp(self.log_pdf(X))

    def on_grid(self, grid: Grid) -> GridFunction:
        return GridFunction(grid, self.log_pdf(grid.points))


@dataclass(frozen=True, eq=False)
class MixturePotential:
    """``log phi(x) = logsumexp_i (g_i - x' P_i x / 2 + h_i' x)``.

    The precisions ``P_i`` only need to be symmetric; indefinite ones arise
    as ratios of Gaussians.
    """

    g: np.ndarray
    P: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.g, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(g.size, -1)
        n = h.shape[1]
        P = np.asarray(self.P, dtype=float).reshape(g.size, n, n)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "P", 0.5 * (P + np.swapaxes(P, -1, -2)))

    @classmethod
    def constant(cls, n: int, value: float = 1.0) -> "MixturePotential":
        return cls(np.array([math.log(value)]), np.zeros((1, n, n)), np.zeros((1, n)))

    @property
    def n(self) -> int:
        return self.h.shape[1]

    @property
    def components(self) -> int:
        return self.g.size

    def _exponents(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, self.n) if X.ndim < 2 else X
        return self.g[None, :] - 0.5 * np.einsum("pi,kij,pj->pk", X, self.P, X) + X @ self.h.T

    def log(self, X) -> np.ndarray:
        return logsumexp(self._exponents(X), axis=1)

    def __call__(self, X) -> np.ndarray:
        return np.exp(self.log(X))

    def grad_log(self, X) -> np.ndarray:
        """Analytic ``grad log phi`` at each row of ``X``."""
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, self.n) if X.ndim < 2 else X
        E = self._exponents(X)
        r = np.exp(E - logsumexp(E, axis=1, keepdims=True))
        comp = self.h[None, :, :] - np.einsum("kij,pj->pki", self.P, X)
        return np.einsum("pk,pki->pi", r, comp)

    def scaled(self, c: float) -> "MixturePotential":
        return MixturePotential(self.g + math.log(c), self.P, self.h)

    def divide_into(self, rho: "MixturePotential") -> "MixturePotential":
        """``rho / self`` for single-component arguments (closed under division)."""
        if self.components != 1 or rho.components != 1:
            raise ValueError("exp-quadratic division needs single components")
        return MixturePotential(rho.g - self.g, rho.P - self.P, rho.h - self.h)


def grad_log_potential(phi: MixturePotential, X) -> np.ndarray:
    return phi.grad_log(X)


# --- transforms --------------------------------------------------------------------


def _blocks(K: KernelEvaluator, over: str):
    M = K.M
    if over == "x":  # integrate the first argument, output is a function of y
        return M.M11, M.M12, M.M22
    return M.M22, M.M21, M.M11


def _mixture_transform(K: KernelEvaluator, phi: MixturePotential, over: str) -> MixturePotential:
    Maa, Mab, Mbb = _blocks(K, over)
    n = K.n
    g_out, P_out, h_out = [], [], []
    for g, P, h in zip(phi.g, phi.P, phi.h):
        Aq = Maa + P
        try:
            L = np.linalg.cholesky(0.5 * (Aq + Aq.T))
        except np.linalg.LinAlgError as exc:
            raise DomainError("kernel transform diverges: kernel precision plus potential precision is not PD") from exc
        S = np.linalg.inv(Aq)
        S = 0.5 * (S + S.T)
        logdet_S = -2.0 * float(np.sum(np.log(np.diag(L))))
        Mba = Mab.T
        P_out.append(Mbb - Mba @ S @ Mab)
        h_out.append(-Mba @ S @ h)
        g_out.append(g + K.log_c + 0.5 * n * LOG_2PI + 0.5 * logdet_S + 0.5 * h @ S @ h)
    return MixturePotential(np.array(g_out), np.array(P_out), np.array(h_out))


def _log_kernel_matrix(K: KernelEvaluator, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    M = K.M
    qx = np.einsum("pi,ij,pj->p", X, M.M11, X)
    qy = np.einsum("pi,ij,pj->p", Y, M.M22, Y)
    cross = X @ M.M12 @ Y.T
    return K.log_c - 0.5 * (qx[:, None] + 2.0 * cross + qy[None, :])


def _kernel_log_mass(K: KernelEvaluator, Z: np.ndarray, over: str) -> np.ndarray:
    """``log int kappa`` over the integrated argument, for each fixed other argument in ``Z``."""
    Maa, Mab, Mbb = _blocks(K, over)
    S = Mbb - Mab.T @ np.linalg.solve(Maa, Mab)
    _, logdet = np.linalg.slogdet(Maa)
    return K.log_c + 0.5 * K.n * LOG_2PI - 0.5 * logdet - 0.5 * np.einsum("pi,ij,pj->p", Z, S, Z)


def _core_mask(grid: Grid, X: np.ndarray) -> np.ndarray:
    c = 0.5 * (grid.lower + grid.upper)
    half = 0.25 * (grid.upper - grid.lower)
    return np.all(np.abs(X - c) <= half, axis=-1)


@dataclass(frozen=True, eq=False)
class GridTransform:
    """Precomputed log-kernel matrix between an input and an output grid."""

    K: KernelEvaluator
    grid_in: Grid
    grid_out: Grid
    over: str
    logK: np.ndarray = field(repr=False)

    def apply(self, f: GridFunction) -> GridFunction:
        return GridFunction(self.grid_out, logsumexp(self.logK + (f.log_values + self.grid_in.log_weights)[:, None], axis=0))

    def eval_at(self, f: GridFunction, Z) -> np.ndarray:
        """Log of the transform at arbitrary output points."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        X = self.grid_in.points
        L = _log_kernel_matrix(self.K, X, Z) if self.over == "x" else _log_kernel_matrix(self.K, Z, X).T
        return logsumexp(L + (f.log_values + self.grid_in.log_weights)[:, None], axis=0)


def grid_transform(
    K: KernelEvaluator,
    grid_in: Grid,
    grid_out: Grid,
    over: str,
    tail_tol: float = TAIL_TOL,
    logK: np.ndarray | None = None,
    core: np.ndarray | None = None,
) -> GridTransform:
    """Build the quadrature operator and run the tail test.

    For the output points selected by ``core`` (default: the central half of
    the output box) the kernel mass falling outside the input box must stay
    below ``tail_tol`` of the mass inside; otherwise :class:`TruncationError`
    is raised. A precomputed ``logK`` (rows: input points) skips the kernel
    evaluation.
    """
    Xin, Zout = grid_in.points, grid_out.points
    if logK is not None:
        L = logK
    else:
        L = _log_kernel_matrix(K, Xin, Zout) if over == "x" else _log_kernel_matrix(K, Zout, Xin).T
    core = _core_mask(grid_out, Zout) if core is None else np.asarray(core, dtype=bool)
    Maa = _blocks(K, over)[0]
    sd = np.sqrt(np.diag(np.linalg.inv(Maa)))
    spacing = np.array([a[1] - a[0] if a.size > 1 else 0.0 for a in grid_in.axes])
    if tail_tol is not None and np.any(spacing > MAX_SPACING_RATIO * sd):
        raise ResolutionError(
            f"grid spacing {spacing.tolist()} exceeds {MAX_SPACING_RATIO:g} x the kernel's conditional "
            f"std {sd.tolist()}; refine the grid"
        )
    if tail_tol is not None and np.any(core):
        inside = logsumexp(L[:, core] + grid_in.log_weights[:, None], axis=0)
        total = _kernel_log_mass(K, Zout[core], over)
        outside = -np.expm1(np.minimum(inside - total, 0.0))
        frac = outside / np.exp(np.minimum(inside - total, 0.0))
        worst = float(np.max(frac))
        if worst > tail_tol:
            raise TruncationError(
                f"grid box loses {worst:.3g} of the kernel mass (limit {tail_tol:g}); enlarge the box"
            )
    return GridTransform(K, grid_in, grid_out, over, L)


def transform_forward(K: KernelEvaluator, phihat0, grid_out: Grid | None = None):
    """``y -> int kappa(t0, x, t1, y) phihat0(x) dx``.

    Mixture potentials go through the closed-form Gaussian integral; grid
    potentials through trapezoid quadrature over their box.
    """
    if isinstance(phihat0, GaussianMixture):
        phihat0 = phihat0.as_potential()
    if isinstance(phihat0, MixturePotential):
        return _mixture_transform(K, phihat0, "x")
    return grid_transform(K, phihat0.grid, grid_out or phihat0.grid, "x").apply(phihat0)


def transform_backward(K: KernelEvaluator, phi1, grid_out: Grid | None = None):
    """``x -> int kappa(t0, x, t1, y) phi1(y) dy``."""
    if isinstance(phi1, GaussianMixture):
        phi1 = phi1.as_potential()
    if isinstance(phi1, MixturePotential):
        return _mixture_transform(K, phi1, "y")
    return grid_transform(K, phi1.grid, grid_out or phi1.grid, "y").apply(phi1)


# --- Sinkhorn ------------------------------------------------------------------------


def _kernel_half_width(K: KernelEvaluator, mid: np.ndarray, support_half: np.ndarray) -> np.ndarray:
    """Half-widths that keep, for every point of the support box, the
    conditional mean of the integrated argument plus ``KERNEL_MARGIN``
    conditional standard deviations inside the grid box."""
    M = K.M
    need = []
    for Maa, Mab in ((M.M11, M.M12), (M.M22, M.M21)):
        inv = np.linalg.inv(Maa)
        T = -inv @ Mab
        shift = np.abs((T - np.eye(K.n)) @ mid)
        need.append(shift + np.abs(T) @ support_half + KERNEL_MARGIN * np.sqrt(np.diag(inv)))
    return np.max(need, axis=0)


def support_mask(grid: Grid, *densities) -> np.ndarray:
    """Grid points where any density exceeds ``SUPPORT_LEVEL`` of its maximum."""
    mask = np.zeros(grid.size, dtype=bool)
    for rho in densities:
        lv = rho.log_values
        mask |= lv >= np.max(lv) + math.log(SUPPORT_LEVEL)
    return mask


def default_grid(rho0, rho1, points: int | None = None, width: float = 6.0, kernel: KernelEvaluator | None = None) -> Grid:
    """Box spanning ``mean +- width * std`` of both endpoints, per axis.

    With a kernel the box is widened so that the tail test holds on the
    endpoint supports (``mean +- SUPPORT_SD * std``).
    """
    lo, hi, slo, shi = [], [], [], []
    for rho in (rho0, rho1):
        mu, cov = rho.moments()
        sd = np.sqrt(np.diag(cov))
        lo.append(mu - width * sd)
        hi.append(mu + width * sd)
        slo.append(mu - SUPPORT_SD * sd)
        shi.append(mu + SUPPORT_SD * sd)
    lo, hi = np.min(lo, axis=0), np.max(hi, axis=0)
    n = lo.size
    if n > 2:
        raise ValueError("grid Sinkhorn supports n <= 2")
    if kernel is not None:
        slo, shi = np.min(slo, axis=0), np.max(shi, axis=0)
        mid = 0.5 * (slo + shi)
        half = np.maximum(_kernel_half_width(kernel, mid, 0.5 * (shi - slo)), 0.5 * (hi - lo))
        lo, hi = np.minimum(lo, mid - half), np.maximum(hi, mid + half)
    points = (256 if n == 1 else 64) if points is None else points
    return Grid.box(lo, hi, points)


def _as_grid_density(rho, grid: Grid) -> GridFunction:
    if isinstance(rho, GaussianMixture):
        return rho.on_grid(grid)
    if isinstance(rho, GridFunction):
        if rho.grid is grid:
            return rho
        return GridFunction(grid, rho.log(grid.points))
    raise TypeError(f"unsupported density type {type(rho).__name__}")


def hilbert_gap(f: GridFunction, g: GridFunction) -> float:
    """Hilbert projective distance ``max log(f/g) - min log(f/g)`` over the grid."""
    d = f.log_values - g.log_values
    ok = np.isfinite(d)
    if not np.any(ok):
        return 0.0
    return float(np.max(d[ok]) - np.min(d[ok]))


def _ratio(log_rho: np.ndarray, log_den: np.ndarray, what: str) -> np.ndarray:
    bad = np.isfinite(log_rho) & (log_den < LOG_RATIO_FLOOR)
    if np.any(bad):
        raise SinkhornUnderflowError(
            f"{what}: transform fell below {RATIO_FLOOR:g} where the density is positive; enlarge the grid box"
        )
    out = log_rho - log_den
    out[~np.isfinite(log_rho)] = -np.inf
    return out


def _sup_residual(log_est: np.ndarray, rho: GridFunction) -> float:
    r = rho.values
    return float(np.max(np.abs(np.exp(log_est) - r)) / np.max(r))


@dataclass(eq=False)
class SinkhornState:
    """Potential pair and diagnostics of a Sinkhorn run.

    ``marginal_residuals[k]`` holds ``(res0, res1)`` after sweep ``k``:
    ``res0 = |phihat0 * T10 phi1 - rho0|`` with the pre-update ``phihat0``
    and ``res1 = |T01 phihat0 * phi1 - rho1|`` with the updated one, both as
    sup norms relative to ``max rho``.
    """

    kernel: KernelEvaluator
    grid: Grid
    rho0: GridFunction
    rho1: GridFunction
    phihat0: GridFunction
    phi1: GridFunction
    iteration: int = 0
    hilbert_gaps: list = field(default_factory=list)
    marginal_residuals: list = field(default_factory=list)
    converged: bool = False
    rho1_source: object = field(default=None, repr=False)

    @property
    def residuals(self) -> tuple[float, float]:
        return self.marginal_residuals[-1] if self.marginal_residuals else (math.inf, math.inf)

    def gauge(self, c: float) -> "SinkhornState":
        """Same bridge with ``(phihat0, phi1) -> (c phihat0, phi1 / c)``."""
        return SinkhornState(
            self.kernel, self.grid, self.rho0, self.rho1, self.phihat0.scaled(c), self.phi1.scaled(1.0 / c),
            self.iteration, list(self.hilbert_gaps), list(self.marginal_residuals), self.converged,
            self.rho1_source,
        )

    def trace_table(self) -> tuple[list[str], list[list]]:
        cols = ["iteration", "hilbert_gap", "residual0", "residual1"]
        rows = [[k + 1, g, r[0], r[1]] for k, (g, r) in enumerate(zip(self.hilbert_gaps, self.marginal_residuals))]
        return cols, rows


def gaps_monotone(gaps: Sequence[float], burn_in: int = 3) -> bool:
    g = np.asarray(gaps[burn_in:], dtype=float)
    return bool(np.all(np.diff(g) <= 0.0))


def sinkhorn_solve(
    K: KernelEvaluator,
    rho0,
    rho1,
    tol: float = 1e-9,
    max_iter: int = 500,
    grid: Grid | None = None,
    burn_in: int = 3,
) -> SinkhornState:
    """Iterate the Sinkhorn sweep on a common grid until the Hilbert gap
    between successive ``phihat0`` drops below ``tol``."""
    grid = default_grid(rho0, rho1, kernel=K) if grid is None else grid
    r0, r1 = _as_grid_density(rho0, grid), _as_grid_density(rho1, grid)
    for r, name in ((r0, "rho0"), (r1, "rho1")):
        m = r.mass()
        if not (m > 0 and np.isfinite(m)):
            raise ValueError(f"{name} has no positive mass on the grid")
    core = support_mask(grid, r0, r1)
    fwd = grid_transform(K, grid, grid, "x", core=core)
    # same grid both ways: the backward matrix is the transpose
    bwd = grid_transform(K, grid, grid, "y", logK=fwd.logK.T, core=core)
    ph0 = GridFunction(grid, np.zeros(grid.size))
    st = SinkhornState(K, grid, r0, r1, ph0, GridFunction(grid, np.zeros(grid.size)), rho1_source=rho1)
    ph1 = fwd.apply(ph0)
    for k in range(max_iter):
        lphi1 = _ratio(r1.log_values, ph1.log_values, "rho1 / phihat1")
        phi1 = GridFunction(grid, lphi1)
        phi0 = bwd.apply(phi1)
        res0 = _sup_residual(st.phihat0.log_values + phi0.log_values, r0)
        new = GridFunction(grid, _ratio(r0.log_values, phi0.log_values, "rho0 / phi0"))
        gap = hilbert_gap(new, st.phihat0)
        ph1 = fwd.apply(new)
        res1 = _sup_residual(ph1.log_values + lphi1, r1)
        st.phihat0, st.phi1 = new, phi1
        st.iteration = k + 1
        st.hilbert_gaps.append(gap)
        st.marginal_residuals.append((res0, res1))
        if gap < tol:
            st.converged = True
            break
    if not gaps_monotone(st.hilbert_gaps, burn_in):
        warnings.warn("Hilbert gaps increased after the burn-in window", HilbertGapWarning, stacklevel=2)
    return st


def gaussian_sinkhorn(
    K: KernelEvaluator, rho0: GaussianMixture, rho1: GaussianMixture, tol: float = 1e-13, max_iter: int = 10_000
) -> tuple[MixturePotential, MixturePotential, int]:
    """Sinkhorn on exp-quadratic potentials for single-Gaussian endpoints.

    Every arrow stays in closed form, so this is an exact reference for the
    grid solver. Returns ``(phihat0, phi1, iterations)``.
    """
    if len(rho0.weights) != 1 or len(rho1.weights) != 1:
        raise ValueError("closed-form Sinkhorn needs single Gaussians")
    r0, r1 = rho0.as_potential(), rho1.as_potential()
    ph0 = MixturePotential.constant(K.n)
    for k in range(max_iter):
        phi1 = transform_forward(K, ph0).divide_into(r1)
        new = transform_backward(K, phi1).divide_into(r0)
        # compare the x-dependent parts only (the scale is a gauge)
        d = np.max(np.abs(new.P - ph0.P)) + np.max(np.abs(new.h - ph0.h))
        ph0 = new
        if d < tol:
            return ph0, phi1, k + 1
    return ph0, phi1, max_iter


# --- propagation and the bridge ------------------------------------------------------------


class KernelCache:
    """Evaluators ``kappa(ta, ., tb, .)`` built on demand and kept by ``(ta, tb)``."""

    def __init__(self, sys: LtvSystem, per_octave: int | None = None, base: KernelEvaluator | None = None):
        self.sys = sys
        self.per_octave = per_octave
        self._store: dict = {}
        if base is not None:
            self._store[self._key(base.t0, base.t)] = base

    @staticmethod
    def _key(ta, tb):
        return (round(float(ta), 12), round(float(tb), 12))

    def __call__(self, ta: float, tb: float) -> KernelEvaluator:
        key = self._key(ta, tb)
        if key not in self._store:
            kw = {} if self.per_octave is None else {"per_octave": self.per_octave}
            self._store[key] = build_kernel(self.sys, tb, ta, **kw)
        return self._store[key]

    def __len__(self):
        return len(self._store)


def _at(t, ref):
    return abs(t - ref) <= 1e-12 * max(1.0, abs(ref))


def propagate_potentials(cache: KernelCache, state: SinkhornState, t: float) -> tuple[GridFunction, GridFunction]:
    """``(phihat(t), phi(t))`` on the state's grid."""
    t0, t1 = state.kernel.t0, state.kernel.t
    grid = state.grid
    if _at(t, t0):
        return state.phihat0, GridFunction(grid, _ratio(state.rho0.log_values, state.phihat0.log_values, "rho0 / phihat0"))
    if _at(t, t1):
        return GridFunction(grid, _ratio(state.rho1.log_values, state.phi1.log_values, "rho1 / phi1")), state.phi1
    if not t0 < t < t1:
        raise ValueError(f"t={t} outside the bridge horizon")
    core = support_mask(grid, state.rho0, state.rho1)
    ph = grid_transform(cache(t0, t), grid, grid, "x", core=core).apply(state.phihat0)
    phi = grid_transform(cache(t, t1), grid, grid, "y", core=core).apply(state.phi1)
    return ph, phi


def log_phi_at(cache: KernelCache, state: SinkhornState, t: float, X) -> np.ndarray:
    """``log phi(t, x)`` at arbitrary points by direct quadrature.

    At ``t1`` this is ``log rho1 - log T01 phihat0``; a gridded ``rho1`` is
    interpolated there.
    """
    t1 = state.kernel.t
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if _at(t, t1):
        src = state.rho1_source
        lr = src.log_pdf(X) if isinstance(src, GaussianMixture) else state.rho1.log(X)
        fwd = GridTransform(state.kernel, state.grid, state.grid, "x", np.empty((0, 0)))
        return lr - fwd.eval_at(state.phihat0, X)
    K = cache(t, t1)
    tr = GridTransform(K, state.grid, state.grid, "y", np.empty((0, 0)))
    return tr.eval_at(state.phi1, X)


def optimal_control(cache: KernelCache, state, t: float, x, h: float | None = None) -> np.ndarray:
    """Feedback ``u(t, x) = 2 B_t' grad log phi(t, x)``.

    ``state`` may be a converged :class:`SinkhornState` (central differences
    of the quadrature, step ``1e-5 * max(1, |x_i|)``) or a
    :class:`MixturePotential` giving ``phi(t, .)`` directly (analytic).
    """
    X = np.atleast_2d(np.asarray(x, dtype=float))
    Bt = cache.sys.B(t)
    if isinstance(state, MixturePotential):
        lp = state.log(X)
        if np.any(lp < LOG_RATIO_FLOOR):
            raise PositivityError("phi vanishes at an evaluation point")
        grad = state.grad_log(X)
    else:
        lp = log_phi_at(cache, state, t, X)
        if np.any(lp < LOG_RATIO_FLOOR):
            raise PositivityError("phi vanishes at an evaluation point")
        grad = np.empty_like(X)
        for i in range(X.shape[1]):
            step = (1e-5 if h is None else h) * np.maximum(1.0, np.abs(X[:, i]))
            E = np.zeros_like(X)
            E[:, i] = step
            grad[:, i] = (log_phi_at(cache, state, t, X + E) - log_phi_at(cache, state, t, X - E)) / (2.0 * step)
    u = 2.0 * grad @ Bt
    return u[0] if np.ndim(x) == 1 or (np.ndim(x) == 0) else u


@dataclass(frozen=True, eq=False)
class BridgeSolution:
    times: np.ndarray
    grid: Grid
    marginals: list
    log_phi: np.ndarray = field(repr=False)
    control: np.ndarray = field(repr=False)
    state: SinkhornState = field(repr=False)

    def masses(self) -> np.ndarray:
        return np.array([m.mass() for m in self.marginals])


def solve_bridge(
    sys: LtvSystem,
    rho0,
    rho1,
    slices: int = 11,
    tol: float = 1e-9,
    max_iter: int = 500,
    grid: Grid | None = None,
    per_octave: int | None = None,
    control_step: float = 1e-5,
    points: int | None = None,
    width: float = 6.0,
) -> BridgeSolution:
    """Sinkhorn solve plus marginals, ``log phi`` and the control on ``slices`` times.

    Without ``grid`` the box comes from :func:`default_grid` with ``points`` and ``width``.
    """
    cache = KernelCache(sys, per_octave)
    K = cache(sys.t0, sys.t1)
    if grid is None:
        grid = default_grid(rho0, rho1, points, width, kernel=K)
    st = sinkhorn_solve(K, rho0, rho1, tol=tol, max_iter=max_iter, grid=grid)
    times = np.linspace(sys.t0, sys.t1, slices)
    margs, logphi, ctrl = [], [], []
    P = st.grid.points
    for t in times:
        ph, phi = propagate_potentials(cache, st, t)
        margs.append(GridFunction(st.grid, ph.log_values + phi.log_values))
        logphi.append(phi.log_values)
        inner = st.grid.contains(P + control_step * np.maximum(1.0, np.abs(P))) & st.grid.contains(
            P - control_step * np.maximum(1.0, np.abs(P))
        )
        u = np.full((P.shape[0], sys.m), np.nan)
        u[inner] = optimal_control(cache, st, t, P[inner], h=control_step)
        ctrl.append(u)
    return BridgeSolution(times, st.grid, margs, np.array(logphi), np.array(ctrl), st)
