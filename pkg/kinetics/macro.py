"""
Truncated Smoluchowski system

    d/dt f_n = d(n) Laplace f_n + sum_{m<n} beta(m, n-m) f_m f_{n-m}
               - 2 f_n sum_{m<=M} beta(m, n) f_m,     1 <= n <= M,

in homogeneous (ODE) and spatial (diffusion-reaction) modes. Mass carried
above M by coagulation is booked in a truncation-flux ledger so that
conservation of sum n f_n stays checkable.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .cell import CellSolver, build_grid, capacity_reference, DEFAULT_TOL
from .exceptions import ConservationError, StepRejectedError

logger = logging.getLogger(__name__)

NEGATIVITY_TOL = 1e-12
CONSERVATION_TOL = 1e-10
CLIP_WARNING = 1e-9
MAX_HALVINGS = 12
BOUNDARIES = ("torus", "zero-flux")


# ==============================
# Coefficients
# ==============================

@dataclass(frozen=True)
class BetaMatrix:
    """beta(n, m) for 1 <= n, m <= m_max, stored 0-based."""
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("beta matrix must be square")
        if np.any(values < 0):
            raise ValueError("beta matrix has negative entries")
        if not np.array_equal(values, values.T):
            raise ValueError("beta matrix is not symmetric")
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, m_max, value):
        return cls(np.full((m_max, m_max), float(value)))

    @property
    def m_max(self):
        return self.values.shape[0]

    def __call__(self, n, m):
        return float(self.values[n - 1, m - 1])

    def scaled(self, factor):
        return BetaMatrix(self.values * factor)

    def within_capacity(self, dd, capacity, tol=1e-6):
        masses = np.arange(1, self.m_max + 1)
        bound = (dd.evaluate(masses)[:, None] + dd.evaluate(masses)[None, :]) * capacity
        return bool(np.all(self.values <= bound + tol))


@dataclass(frozen=True)
class BetaRow:
    n: int
    m: int
    alpha: float
    alpha_prime: float
    beta: float
    residual: float


def beta_table(m_max, kernel, alpha, dd, grid=None, tol=DEFAULT_TOL, solver=None) -> List[BetaRow]:
    """Cell-problem rates for every n <= m <= m_max."""
    solver = solver or CellSolver(grid if grid is not None else build_grid(kernel), tol)
    rows = []
    for n in range(1, m_max + 1):
        for m in range(n, m_max + 1):
            a = alpha(n, m)
            coupling = a / (dd(n) + dd(m))
            solution = solver.solve(coupling)
            rows.append(BetaRow(n, m, a, coupling, a * solution.absorption, solution.residual))
    logger.info("beta table up to m_max=%d: %d pairs, %d distinct cell problems",
                m_max, len(rows), len({row.alpha_prime for row in rows}))
    return rows


def beta_matrix_from_rows(rows, m_max) -> BetaMatrix:
    values = np.zeros((m_max, m_max))
    for row in rows:
        if row.n <= m_max and row.m <= m_max:
            values[row.n - 1, row.m - 1] = row.beta
            values[row.m - 1, row.n - 1] = row.beta
    return BetaMatrix(values)


def beta_matrix(m_max, kernel, alpha, dd, grid=None, tol=DEFAULT_TOL, solver=None) -> BetaMatrix:
    """Solve n <= m and mirror, so the matrix is symmetric by construction."""
    matrix = beta_matrix_from_rows(beta_table(m_max, kernel, alpha, dd, grid, tol, solver), m_max)
    capacity = capacity_reference(kernel).value
    if not matrix.within_capacity(dd, capacity):
        logger.warning("beta exceeds the capacity bound somewhere below m_max=%d", m_max)
    return matrix


# ==============================
# Grids and state
# ==============================

@dataclass(frozen=True)
class MacroGrid:
    """
    Uniform lattice of ``shape`` nodes with spacing ``spacing``. Torus nodes
    sit at lo + k h; zero-flux nodes are cell centres lo + (k + 1/2) h.
    """
    shape: Tuple[int, ...]
    spacing: float
    boundary: str = "torus"
    lo: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.spacing <= 0 or min(self.shape) < 3:
            raise ValueError("grid needs positive spacing and three nodes per axis")
        if self.lo is None:
            object.__setattr__(self, "lo", (0.0,) * len(self.shape))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def cell_volume(self):
        return self.spacing ** self.ndim

    @property
    def extent(self):
        return tuple(n * self.spacing for n in self.shape)

    @property
    def axes(self):
        shift = 0.0 if self.boundary == "torus" else 0.5
        return [a + self.spacing * (np.arange(n) + shift) for a, n in zip(self.lo, self.shape)]

    @property
    def nodes(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.ndim)

    def integrate(self, values):
        """Sum over the trailing grid axes times the cell volume."""
        values = np.asarray(values, dtype=float)
        axes = tuple(range(values.ndim - self.ndim, values.ndim))
        return values.sum(axis=axes) * self.cell_volume

    def laplacian(self, values):
        """Second-order central differences over the trailing grid axes."""
        values = np.asarray(values, dtype=float)
        lead = values.ndim - self.ndim
        result = -2.0 * self.ndim * values
        for k in range(self.ndim):
            axis = lead + k
            if self.boundary == "torus":
                result = result + np.roll(values, 1, axis=axis) + np.roll(values, -1, axis=axis)
            else:
                pad = [(0, 0)] * values.ndim
                pad[axis] = (1, 1)
                padded = np.pad(values, pad, mode="edge")
                n = values.shape[axis]
                result = result + np.take(padded, range(0, n), axis=axis) + np.take(padded, range(2, n + 2), axis=axis)
        return result / self.spacing ** 2

    def stable_step(self, max_diffusion):
        return self.spacing ** 2 / (2.0 * self.ndim * max_diffusion)


@dataclass
class MassLedger:
    initial_mass: float
    current_mass: float
    truncation_flux: float = 0.0
    clipped_mass: float = 0.0

    @property
    def drift(self):
        """current + flux - clipped - initial; zero up to rounding."""
        return self.current_mass + self.truncation_flux - self.clipped_mass - self.initial_mass

    @property
    def relative_drift(self):
        return abs(self.drift) / self.initial_mass if self.initial_mass else abs(self.drift)

    def as_dict(self):
        return {
            "initial_mass": self.initial_mass,
            "current_mass": self.current_mass,
            "truncation_flux": self.truncation_flux,
            "clipped_mass": self.clipped_mass,
            "relative_drift": self.relative_drift,
        }


@dataclass
class MacroField:
    """
    f[n-1] holds f_n: a scalar in homogeneous mode, an array of grid shape in
    spatial mode. Homogeneous densities live on a box of ``volume``.
    """
    mode: str
    f: np.ndarray
    t: float = 0.0
    grid: Optional[MacroGrid] = None
    volume: float = 1.0
    ledger: Optional[MassLedger] = None

    def __post_init__(self):
        if self.mode not in ("homogeneous", "spatial"):
            raise ValueError(f"unknown macro mode {self.mode!r}")
        self.f = np.asarray(self.f, dtype=float)
        if self.mode == "spatial":
            if self.grid is None or self.f.shape[1:] != tuple(self.grid.shape):
                raise ValueError("spatial fields need a grid matching the array shape")
        elif self.f.ndim != 1:
            raise ValueError("homogeneous fields are one value per mass")
        if np.any(self.f < 0):
            raise ValueError("densities must be nonnegative")
        if self.ledger is None:
            mass = self.total_mass()
            self.ledger = MassLedger(mass, mass)

    @property
    def m_max(self):
        return self.f.shape[0]

    def totals(self, f=None):
        """Integral of each f_n."""
        f = self.f if f is None else f
        if self.mode == "spatial":
            return self.grid.integrate(f)
        return f * self.volume

    def total_mass(self, f=None):
        return float(np.dot(np.arange(1, self.m_max + 1), self.totals(f)))

    def copy(self):
        return replace(self, f=self.f.copy(), ledger=replace(self.ledger))


def homogeneous_field(densities, m_max, volume=1.0):
    """Constant densities f_n = (integral of h_n) / volume."""
    f = np.array([densities.intensity_of(n) for n in range(1, m_max + 1)]) / volume
    return MacroField("homogeneous", f, volume=volume)


def spatial_field(densities, m_max, grid):
    nodes = grid.nodes
    f = np.stack([densities.density(n, nodes).reshape(grid.shape) for n in range(1, m_max + 1)])
    return MacroField("spatial", f, grid=grid)


# ==============================
# Reaction terms
# ==============================

def gain(f, n, beta):
    """sum_{m=1}^{n-1} beta(m, n-m) f_m f_{n-m}, with f_0 = 0."""
    f = np.asarray(f, dtype=float)
    if n < 2:
        return np.zeros(f.shape[1:]) if f.ndim > 1 else 0.0
    m = np.arange(1, n)
    coeff = beta.values[m - 1, n - m - 1]
    coeff = coeff.reshape((-1,) + (1,) * (f.ndim - 1))
    return np.sum(coeff * f[m - 1] * f[n - m - 1], axis=0)


def loss(f, n, beta):
    """2 f_n sum_{m=1}^{M} beta(m, n) f_m."""
    f = np.asarray(f, dtype=float)
    return 2.0 * f[n - 1] * np.tensordot(beta.values[:, n - 1], f, axes=([0], [0]))


def reaction_rates(f, beta):
    """
    All gain and loss terms at once, plus the rate at which mass leaves
    through coagulations producing masses above M (ordered pairs m + k > M).
    """
    f = np.asarray(f, dtype=float)
    size = f.shape[0]
    trailing = (1,) * (f.ndim - 1)
    gains = np.zeros_like(f)
    flux = np.zeros(f.shape[1:])
    for i in range(size):
        term = beta.values[i].reshape((size,) + trailing) * f * f[i]
        split = size - i - 1
        gains[i + 1:] += term[:split]
        masses = (np.arange(split, size) + i + 2).reshape((-1,) + trailing)
        flux = flux + np.sum(masses * term[split:], axis=0)
    losses = 2.0 * f * np.tensordot(beta.values, f, axes=([1], [0]))
    return gains, losses, flux


class _NegativeStage(Exception):
    pass


def _rk4(f, dt, beta):
    scale = float(np.max(np.abs(f))) if f.size else 0.0
    floor = -NEGATIVITY_TOL * scale

    def rhs(y):
        if y.size and y.min() < floor:
            raise _NegativeStage(float(y.min()))
        g, l, flux = reaction_rates(y, beta)
        return g - l, flux

    k1, q1 = rhs(f)
    k2, q2 = rhs(f + 0.5 * dt * k1)
    k3, q3 = rhs(f + 0.5 * dt * k2)
    k4, q4 = rhs(f + dt * k3)
    return f + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), dt / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)


def react(f, dt, beta, depth=0):
    """
    One RK4 step of the reaction terms, halved recursively when a stage goes
    negative. Returns (f, flux increment, clipped amount per mass).
    """
    try:
        f_new, flux = _rk4(f, dt, beta)
    except _NegativeStage as exc:
        if depth >= MAX_HALVINGS:
            raise StepRejectedError(f"negative stage {exc.args[0]:.3e} persists at dt={dt:.3e}") from exc
        logger.debug("negative stage at dt=%.3e (depth %d); halving", dt, depth)
        f_half, flux_a, clip_a = react(f, 0.5 * dt, beta, depth + 1)
        f_new, flux_b, clip_b = react(f_half, 0.5 * dt, beta, depth + 1)
        return f_new, flux_a + flux_b, clip_a + clip_b
    clipped = np.maximum(-f_new, 0.0)
    return np.maximum(f_new, 0.0), flux, clipped


def _book(field, f_new, flux, clipped, dt):
    """Update the ledger for one step and check the discrete conservation law."""
    ledger = field.ledger
    before = ledger.current_mass + ledger.truncation_flux - ledger.clipped_mass
    weights = np.arange(1, field.m_max + 1)
    if field.mode == "spatial":
        flux_total = float(field.grid.integrate(flux))
        clipped_total = float(np.dot(weights, field.grid.integrate(clipped)))
    else:
        flux_total = float(flux) * field.volume
        clipped_total = float(np.dot(weights, clipped)) * field.volume
    current = field.total_mass(f_new)
    after = current + ledger.truncation_flux + flux_total - (ledger.clipped_mass + clipped_total)
    reference = max(abs(before), current, 1e-300)
    if abs(after - before) > CONSERVATION_TOL * reference:
        raise ConservationError(
            f"mass balance off by {after - before:.3e} over a step of {dt:.3e}"
        )
    if clipped_total > CLIP_WARNING * reference:
        logger.warning("clipped %.3e of mass at t=%.6g", clipped_total, field.t + dt)
    return MassLedger(
        initial_mass=ledger.initial_mass,
        current_mass=current,
        truncation_flux=ledger.truncation_flux + flux_total,
        clipped_mass=ledger.clipped_mass + clipped_total,
    )


def step_homogeneous(field, dt, beta):
    """Classical RK4 step of df_n/dt = gain - loss."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if field.m_max != beta.m_max:
        raise ValueError("beta matrix and field disagree on m_max")
    f_new, flux, clipped = react(field.f, dt, beta)
    ledger = _book(field, f_new, flux, clipped, dt)
    return replace(field, f=f_new, t=field.t + dt, ledger=ledger)


def _diffuse_explicit(field, dt, dd):
    rates = dd.evaluate(np.arange(1, field.m_max + 1))
    limit = field.grid.stable_step(float(rates.max()))
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds the explicit diffusion bound {limit:g}")
    coeff = rates.reshape((-1,) + (1,) * field.grid.ndim)
    return field.f + dt * coeff * field.grid.laplacian(field.f)


def step_spatial(field, dt, beta, dd):
    """Strang splitting: half reaction, full explicit diffusion, half reaction."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if field.mode != "spatial":
        raise ValueError("step_spatial needs a spatial field")
    f_a, flux_a, clip_a = react(field.f, 0.5 * dt, beta)
    diffused = _diffuse_explicit(replace(field, f=f_a), dt, dd)
    f_b, flux_b, clip_b = react(diffused, 0.5 * dt, beta)
    ledger = _book(field, f_b, flux_a + flux_b, clip_a + clip_b, dt)
    return replace(field, f=f_b, t=field.t + dt, ledger=ledger)


def check_stability(field, dt, dd):
    if field.mode != "spatial":
        return
    limit = field.grid.stable_step(float(dd.evaluate(np.arange(1, field.m_max + 1)).max()))
    if dt > limit * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds the explicit diffusion bound {limit:g}")


# ==============================
# Driver
# ==============================

@dataclass
class MacroTrajectory:
    times: List[float]
    fields: List[MacroField]

    @property
    def final(self):
        return self.fields[-1]

    @property
    def ledger(self):
        return self.final.ledger

    def at(self, t):
        for time, value in zip(self.times, self.fields):
            if math.isclose(time, t, rel_tol=1e-12, abs_tol=1e-12):
                return value
        raise KeyError(f"no snapshot at t={t!r}")

    def count_rows(self):
        """(t, integral of f_n for each n) per snapshot."""
        return [(t, tuple(float(v) for v in field.totals())) for t, field in zip(self.times, self.fields)]


def solve(f0, horizon, dt, beta, dd=None, snapshot_times: Sequence[float] = (), observers: Sequence[Callable] = ()):
    """
    Advance f0 to the horizon, landing exactly on every snapshot time. Each
    interval between snapshots is cut into equal steps no longer than dt.
    """
    if horizon < 0:
        raise ValueError("horizon cannot be negative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if f0.mode == "spatial":
        if dd is None:
            raise ValueError("spatial runs need the diffusion policy")
        check_stability(f0, dt, dd)
    targets = sorted({float(t) for t in snapshot_times if 0 < t < horizon} | ({float(horizon)} if horizon > 0 else set()))
    field = f0.copy()
    trajectory = MacroTrajectory([field.t], [field])
    for observer in observers:
        observer(field)
    for target in targets:
        span = target - field.t
        steps = max(1, int(math.ceil(span / dt - 1e-9)))
        h = span / steps
        for _ in range(steps):
            if field.mode == "spatial":
                field = step_spatial(field, h, beta, dd)
            else:
                field = step_homogeneous(field, h, beta)
        field = replace(field, t=target)
        trajectory.times.append(target)
        trajectory.fields.append(field)
        for observer in observers:
            observer(field)
    logger.debug("macro solve to T=%g: relative drift %.3e, truncation flux %.3e",
                 horizon, field.ledger.relative_drift, field.ledger.truncation_flux)
    return trajectory
