"""
Cell problem: Laplace u = a' V (1 + u) with u -> 0 at infinity.

The unknown only matters on the support of V, so the equation is solved
in its second-kind integral form

    u(x) = -a' c0 \\int |x - y|^{2-d} V(y) (1 + u(y)) dy

on a grid covering supp V, and u is reconstructed anywhere else from the
same representation.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.sparse.linalg import LinearOperator, gmres

from .core import ball_volume, kernel_eval, newton_constant, sphere_area
from .exceptions import CellSolveError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_SHELLS = 400
DEFAULT_CELLS_PER_AXIS = 32
DENSE_LIMIT = 10_000
BLOCK_ROWS = 512
REFINEMENT_SWEEPS = 4


# ==============================
# Grids
# ==============================

@dataclass(frozen=True)
class CellGrid:
    """
    Quadrature grid over the support ball of V. ``v_values`` holds V on the
    grid, normalized so that the grid quadrature of V is exactly one.
    """
    mode: str
    dim: int
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    spacing: float
    support_radius: float
    v_values: np.ndarray = field(repr=False)
    edges: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.weights)

    @property
    def volume(self):
        return float(self.weights.sum())

    def integrate(self, values):
        return float(np.dot(self.weights, values))


def radial_grid(kernel, n_shells=DEFAULT_SHELLS):
    """Spherical shells of equal width; nodes at shell midpoints."""
    if not kernel.radial:
        raise ValueError("radial grids need a radial kernel")
    if n_shells < 2:
        raise ValueError("at least two shells are needed")
    edges = np.linspace(0.0, kernel.support_radius, n_shells + 1)
    weights = ball_volume(kernel.dim, edges[1:]) - ball_volume(kernel.dim, edges[:-1])
    masses = kernel.shell_integrals(edges)
    total = masses.sum()
    logger.debug("radial grid with %d shells: V quadrature %.15g", n_shells, total)
    return CellGrid(
        mode="radial",
        dim=kernel.dim,
        nodes=0.5 * (edges[1:] + edges[:-1]),
        weights=weights,
        spacing=float(edges[1] - edges[0]),
        support_radius=kernel.support_radius,
        v_values=masses / weights / total,
        edges=edges,
    )


def cartesian_grid(kernel, cells_per_axis=DEFAULT_CELLS_PER_AXIS, subsamples=4):
    """
    Cubic cells covering the support ball. Cell weights are the sub-sampled
    fraction of the cell inside the ball, rescaled to the exact ball volume.
    """
    dim = kernel.dim
    radius = kernel.support_radius
    h = 2.0 * radius / cells_per_axis
    axis = -radius + h * (np.arange(cells_per_axis) + 0.5)
    centers = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    offsets_1d = h * ((np.arange(subsamples) + 0.5) / subsamples - 0.5)
    offsets = np.stack(np.meshgrid(*([offsets_1d] * dim), indexing="ij"), axis=-1).reshape(-1, dim)

    fractions = np.empty(len(centers))
    v_mean = np.empty(len(centers))
    for start in range(0, len(centers), 4096):
        block = centers[start:start + 4096, None, :] + offsets[None, :, :]
        inside = np.linalg.norm(block, axis=-1) < radius
        fractions[start:start + 4096] = inside.mean(axis=1)
        v_mean[start:start + 4096] = kernel_eval(kernel, block).mean(axis=1)
    keep = fractions > 0
    weights = fractions[keep] * h ** dim
    weights *= ball_volume(dim, radius) / weights.sum()
    # V averaged over the whole cell, redistributed onto the part inside the ball
    v_values = v_mean[keep] / fractions[keep]
    v_values = v_values / np.dot(weights, v_values)
    return CellGrid(
        mode="cartesian",
        dim=dim,
        nodes=centers[keep],
        weights=weights,
        spacing=h,
        support_radius=radius,
        v_values=v_values,
    )


def build_grid(kernel, mode="radial", n_shells=DEFAULT_SHELLS, cells_per_axis=DEFAULT_CELLS_PER_AXIS):
    if mode == "radial":
        return radial_grid(kernel, n_shells)
    if mode == "cartesian":
        return cartesian_grid(kernel, cells_per_axis)
    raise ValueError(f"unknown cell grid mode {mode!r}")


# ==============================
# Newtonian potential
# ==============================

def _shell_kernel(dim, r, lo, hi):
    """
    Exact integral over the shell [lo, hi) of omega s^{d-1} max(r, s)^{2-d} ds,
    the shell average of |x - y|^{2-d} by Newton's theorem.
    """
    r = np.asarray(r, dtype=float)[..., None]
    p = np.clip(r, lo, hi)
    omega = sphere_area(dim)
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(r > 0, r ** (2 - dim) * (p ** dim - lo ** dim) / dim, 0.0)
    return omega * (inner + 0.5 * (hi ** 2 - p ** 2))


def _ball_kernel(dim, dist, cell_weights):
    """
    Potential |x - y|^{2-d} smeared over a ball of the cell's volume centred
    at the node; equal to the point kernel outside that ball.
    """
    omega = sphere_area(dim)
    a = (cell_weights * dim / omega) ** (1.0 / dim)
    with np.errstate(divide="ignore"):
        outside = cell_weights * np.where(dist > 0, dist, 1.0) ** (2 - dim)
    inside = omega * (0.5 * a ** 2 - 0.5 * dist ** 2 + dist ** 2 / dim)
    return np.where(dist >= a, outside, inside)


def _points(grid, x):
    """
    Targets as the grid expects them. Radial grids take radii (scalar or 1-D)
    or an array of points of shape (k, d); cartesian grids take points.
    """
    x = np.asarray(x, dtype=float)
    if grid.mode == "radial":
        if x.ndim >= 2:
            return np.linalg.norm(x, axis=-1).reshape(-1)
        return x.reshape(-1)
    return x.reshape(-1, grid.dim)


def _is_single(grid, x):
    if grid.mode == "radial":
        return np.ndim(x) == 0
    return np.ndim(x) == 1


def potential_matrix(grid, targets):
    """Rows: c0 times the quadrature weights of |x - y|^{2-d} for each target."""
    c0 = newton_constant(grid.dim)
    if grid.mode == "radial":
        return c0 * _shell_kernel(grid.dim, targets, grid.edges[:-1], grid.edges[1:])
    dist = np.linalg.norm(targets[:, None, :] - grid.nodes[None, :, :], axis=-1)
    return c0 * _ball_kernel(grid.dim, dist, grid.weights[None, :])


def newtonian_convolve(grid, f_at_nodes, x):
    """c0 \\int |x - y|^{2-d} f(y) dy by grid quadrature; x may be a node."""
    targets = _points(grid, x)
    f = np.asarray(f_at_nodes, dtype=float)
    values = np.empty(len(targets))
    for start in range(0, len(targets), BLOCK_ROWS):
        values[start:start + BLOCK_ROWS] = potential_matrix(grid, targets[start:start + BLOCK_ROWS]) @ f
    if _is_single(grid, x):
        return float(values[0])
    return values


def newtonian_potential_of_v(grid, x=None):
    """Gamma = c0 |.|^{2-d} * V, at the grid nodes unless x is given."""
    return newtonian_convolve(grid, grid.v_values, grid.nodes if x is None else x)


# ==============================
# Cell problem
# ==============================

@dataclass(frozen=True)
class CellSolution:
    alpha_prime: float
    u_values: np.ndarray = field(repr=False)
    residual: float
    absorption: float
    grid: CellGrid = field(repr=False)
    condition: Optional[float] = None
    alpha: Optional[float] = None

    @property
    def f_of_beta(self):
        """F = a' \\int V (1 + u)."""
        return self.alpha_prime * self.absorption

    @property
    def beta(self):
        if self.alpha is None:
            return None
        return self.alpha * self.absorption

    @property
    def far_field_constant(self):
        """C with -u(x) = C |x|^{2-d} outside the support."""
        return newton_constant(self.grid.dim) * self.f_of_beta

    @property
    def min_u(self):
        return float(self.u_values.min()) if len(self.u_values) else 0.0

    @property
    def max_u(self):
        return float(self.u_values.max()) if len(self.u_values) else 0.0


class CellSolver:
    """
    Solves the discretized cell problem on a fixed grid. Dense systems are
    LU-factorized with a LAPACK condition estimate; larger ones go through
    GMRES on a blocked operator. Solutions are memoized by a'.
    """

    def __init__(self, grid, tol=DEFAULT_TOL):
        if tol <= 0:
            raise ValueError("tolerance must be positive")
        self.grid = grid
        self.tol = tol
        self._matrix = None
        self._cache = {}

    @property
    def matrix(self):
        if self._matrix is None and self.grid.size <= DENSE_LIMIT:
            self._matrix = potential_matrix(self.grid, _points(self.grid, self.grid.nodes))
        return self._matrix

    def apply_potential(self, f):
        if self.matrix is not None:
            return self.matrix @ f
        return np.asarray(newtonian_convolve(self.grid, f, self.grid.nodes))

    def residual(self, alpha_prime, u):
        v = self.grid.v_values
        return float(np.max(np.abs(u + alpha_prime * self.apply_potential(v * (1.0 + u)))))

    def solve(self, alpha_prime):
        if alpha_prime < 0:
            raise ValueError("a' must be nonnegative")
        key = float(alpha_prime)
        if key in self._cache:
            return self._cache[key]
        if key == 0:
            u = np.zeros(self.grid.size)
            solution = CellSolution(0.0, u, 0.0, self.grid.integrate(self.grid.v_values), self.grid, 1.0)
        else:
            solution = self._solve(key)
        self._cache[key] = solution
        return solution

    def _solve(self, alpha_prime):
        v = self.grid.v_values
        rhs = -alpha_prime * self.apply_potential(v)
        condition = None
        if self.matrix is not None:
            system = np.eye(self.grid.size) + alpha_prime * self.matrix * v[None, :]
            anorm = np.linalg.norm(system, 1)
            lu, piv = linalg.lu_factor(system, check_finite=False)
            rcond, info = lapack.dgecon(lu, anorm)
            condition = math.inf if rcond == 0 else 1.0 / rcond
            u = linalg.lu_solve((lu, piv), rhs)
            for _ in range(REFINEMENT_SWEEPS):
                correction = rhs - system @ u
                if np.max(np.abs(correction)) <= 0.1 * self.tol:
                    break
                u = u + linalg.lu_solve((lu, piv), correction)
        else:
            n = self.grid.size
            operator = LinearOperator(
                (n, n), matvec=lambda w: w + alpha_prime * self.apply_potential(v * w), dtype=float
            )
            u = np.zeros(n)
            for _ in range(REFINEMENT_SWEEPS):
                correction = rhs - operator.matvec(u)
                if np.max(np.abs(correction)) <= 0.1 * self.tol:
                    break
                step, info = gmres(operator, correction, atol=0.01 * self.tol, restart=50, maxiter=200)
                if info < 0:
                    raise CellSolveError("GMRES breakdown on the cell problem")
                u = u + step
        residual = self.residual(alpha_prime, u)
        logger.debug("cell problem a'=%.6g on %d nodes: residual %.3e, condition %s",
                     alpha_prime, self.grid.size, residual, condition)
        if not np.all(np.isfinite(u)) or residual > self.tol:
            raise CellSolveError(
                f"cell problem at a'={alpha_prime:g} did not reach tolerance {self.tol:g}",
                condition=condition,
                residual=residual,
            )
        if u.min() < -1 - 1e-9 or u.max() > 1e-9:
            logger.warning("cell solution at a'=%g leaves [-1, 0]: [%.3e, %.3e]", alpha_prime, u.min(), u.max())
        absorption = self.grid.integrate(v * (1.0 + u))
        return CellSolution(alpha_prime, u, residual, absorption, self.grid, condition)


def solve_cell_problem(kernel, alpha_prime, grid=None, tol=DEFAULT_TOL):
    grid = grid if grid is not None else build_grid(kernel)
    return CellSolver(grid, tol).solve(alpha_prime)


def eval_u(solution, x):
    """u anywhere through the integral representation."""
    grid = solution.grid
    if solution.alpha_prime == 0:
        values = np.zeros(len(_points(grid, x)))
    else:
        density = grid.v_values * (1.0 + solution.u_values)
        values = -solution.alpha_prime * np.atleast_1d(newtonian_convolve(grid, density, x))
    if _is_single(grid, x):
        return float(values[0])
    return values


def alpha_prime_of(alpha, dd, n, m):
    return alpha(n, m) / (dd(n) + dd(m))


def compute_beta(n, m, kernel, alpha, dd, grid=None, tol=DEFAULT_TOL, solver=None):
    """beta(n, m) = alpha(n, m) \\int V (1 + u_{n,m})."""
    a = alpha(n, m)
    if a == 0:
        return 0.0
    solver = solver if solver is not None else CellSolver(grid if grid is not None else build_grid(kernel), tol)
    solution = solver.solve(a / (dd(n) + dd(m)))
    return a * solution.absorption


def compute_beta_solution(n, m, alpha, dd, solver):
    """The cell solution of the pair, carrying alpha so that ``beta`` is set."""
    a = alpha(n, m)
    return replace(solver.solve(a / (dd(n) + dd(m))), alpha=a)


# ==============================
# Capacity and the effective-rate curve
# ==============================

@dataclass(frozen=True)
class CapacityRef:
    set_descriptor: str
    value: float

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("capacity must be positive")


def capacity_unit_ball(d):
    """Cap(B_0(1)) = (d-2) omega_d, the mass of the equilibrium measure."""
    if d < 3:
        raise ValueError("capacity is only defined here for d >= 3")
    return (d - 2) * sphere_area(d)


def capacity_ball(d, radius=1.0):
    return capacity_unit_ball(d) * radius ** (d - 2)


def capacity_reference(kernel):
    """Capacity of the support of V (a ball of radius C0)."""
    descriptor = "unit ball" if kernel.support_radius == 1.0 else f"ball of radius {kernel.support_radius:g}"
    return CapacityRef(descriptor, capacity_ball(kernel.dim, kernel.support_radius))


def beta_hard_core(n, m, dd, kernel):
    """Large-alpha limit of beta(n, m): (d(n) + d(m)) Cap(K0)."""
    return (dd(n) + dd(m)) * capacity_reference(kernel).value


def effective_rate_curve(kernel, dd_sum, alphas, grid=None, tol=DEFAULT_TOL, solver=None) -> List[Tuple[float, float]]:
    """Pairs (a', F(a')) with a' = alpha / dd_sum along an ascending alpha list."""
    alphas = list(alphas)
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be sorted ascending")
    if dd_sum <= 0:
        raise ValueError("diffusion sum must be positive")
    solver = solver if solver is not None else CellSolver(grid if grid is not None else build_grid(kernel), tol)
    points = []
    for alpha in alphas:
        coupling = alpha / dd_sum
        points.append((coupling, solver.solve(coupling).f_of_beta))
    if not curve_is_monotone(points, tol):
        logger.warning("effective rate curve is not monotone on the evaluated grid")
    return points


def curve_is_monotone(points, tol=DEFAULT_TOL):
    values = [f for _, f in points]
    return all(b >= a - tol * max(1.0, abs(a)) for a, b in zip(values, values[1:]))
