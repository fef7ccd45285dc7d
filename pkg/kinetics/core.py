"""
Model core: scaling parameters, interaction kernel, rate and diffusion
policies, initial densities and the parameter-hypothesis checker.

Every other module of the app consumes these types. All of them are
immutable after construction.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, special

logger = logging.getLogger(__name__)

SCALING_RTOL = 1e-12
NORMALIZATION_TOL = 1e-8
DEFAULT_TAU_FACTOR = 0.05
DEFAULT_M_MAX = 50
DEFAULT_TAPER = 0.02

KERNEL_PROFILES = ("bump", "quartic", "uniform")
RATE_KINDS = ("constant", "product", "table")
DIFFUSION_KINDS = ("constant", "power", "table")
DENSITY_SHAPES = ("uniform", "gaussian", "grid")


def sphere_area(dim):
    """Surface area of the unit sphere S^{dim-1}."""
    return 2.0 * math.pi ** (dim / 2.0) / special.gamma(dim / 2.0)


def ball_volume(dim, radius=1.0):
    return sphere_area(dim) / dim * np.power(radius, dim)


def newton_constant(dim):
    """c0 = 1 / ((d-2) * omega_d), so that c0 |x|^{2-d} is the Green's function of -Laplace."""
    return 1.0 / ((dim - 2) * sphere_area(dim))


# ==============================
# Scaling parameters
# ==============================

@dataclass(frozen=True)
class SimParams:
    dim: int
    big_z: float
    n_particles: int
    epsilon: float
    tau: float
    horizon: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 3:
            raise ValueError("dimension must be at least 3: pair differences must be transient")
        if self.big_z <= 0:
            raise ValueError("Z must be positive")
        if self.n_particles < 1:
            raise ValueError("at least one particle is required")
        if self.tau <= 0:
            raise ValueError("time step must be positive")
        if self.horizon < 0:
            raise ValueError("horizon cannot be negative")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        scaled = self.n_particles * self.epsilon ** (self.dim - 2)
        if abs(scaled - self.big_z) > SCALING_RTOL * self.big_z:
            raise ValueError(
                f"N * eps^(d-2) = {scaled!r} does not match Z = {self.big_z!r}"
            )

    @property
    def epsilon_power(self):
        """eps^{d-2}, the weight carried by one particle in the empirical measures."""
        return self.epsilon ** (self.dim - 2)

    @property
    def n_steps(self):
        if self.horizon == 0:
            return 0
        return int(math.ceil(self.horizon / self.tau - 1e-9))


def build_params(dim, big_z, n_particles, tau_factor=DEFAULT_TAU_FACTOR, horizon=0.0, seed=0):
    """Derive eps from N eps^{d-2} = Z and tau = tau_factor * eps^2."""
    if dim < 3:
        raise ValueError("dimension must be at least 3: pair differences must be transient")
    if big_z <= 0:
        raise ValueError("Z must be positive")
    if n_particles < 1:
        raise ValueError("at least one particle is required")
    if tau_factor <= 0:
        raise ValueError("tau_factor must be positive")
    epsilon = (big_z / n_particles) ** (1.0 / (dim - 2))
    return SimParams(
        dim=dim,
        big_z=float(big_z),
        n_particles=int(n_particles),
        epsilon=epsilon,
        tau=tau_factor * epsilon ** 2,
        horizon=float(horizon),
        seed=int(seed),
    )


# ==============================
# Interaction kernel V
# ==============================

def _profile_shape(name, rho, taper):
    rho = np.asarray(rho, dtype=float)
    inside = rho < 1.0
    if name == "uniform":
        return np.where(inside, 1.0, 0.0)
    if name == "quartic":
        return np.where(inside, (1.0 - np.minimum(rho, 1.0) ** 2) ** 2, 0.0)
    if name == "bump":
        edge = 1.0 - taper
        phase = np.clip((rho - edge) / taper, 0.0, 1.0)
        return np.where(inside, 0.5 * (1.0 + np.cos(math.pi * phase)), 0.0)
    raise ValueError(f"unknown kernel profile {name!r}")


@dataclass(frozen=True)
class KernelV:
    """
    Nonnegative interaction kernel with compact support in the ball of
    radius ``support_radius``. Radial kernels are described by a profile
    name; general kernels pass a vectorized ``function`` of points.
    """
    dim: int
    support_radius: float = 1.0
    profile: str = "bump"
    taper: float = DEFAULT_TAPER
    scale: float = 1.0
    normalization: Optional[float] = None
    function: Optional[Callable] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dim < 3:
            raise ValueError("dimension must be at least 3")
        if self.support_radius <= 0:
            raise ValueError("support radius must be positive")
        if self.function is None and self.profile not in KERNEL_PROFILES:
            raise ValueError(f"unknown kernel profile {self.profile!r}")
        if not 0 < self.taper <= 1:
            raise ValueError("taper must lie in (0, 1]")

    @property
    def radial(self):
        return self.function is None

    def radial_value(self, r):
        """V as a function of |x| (radial kernels only)."""
        if not self.radial:
            raise ValueError("kernel is not radial")
        return self.scale * _profile_shape(self.profile, np.asarray(r) / self.support_radius, self.taper)

    def __call__(self, x):
        return kernel_eval(self, x)

    def shell_integrals(self, edges, order=8):
        """Integral of V over each spherical shell [edges[k], edges[k+1])."""
        edges = np.asarray(edges, dtype=float)
        nodes, weights = leggauss(order)
        lo, hi = edges[:-1, None], edges[1:, None]
        r = 0.5 * (hi - lo) * nodes[None, :] + 0.5 * (hi + lo)
        jac = 0.5 * (hi - lo)
        vals = self.radial_value(r) * r ** (self.dim - 1)
        return sphere_area(self.dim) * (vals * weights[None, :] * jac).sum(axis=1)


def kernel_eval(V, x):
    """V at points x of shape (..., d); zero outside the support."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    if V.radial:
        return V.radial_value(r)
    values = np.asarray(V.function(x), dtype=float) * V.scale
    return np.where(r < V.support_radius, values, 0.0)


def _tensor_quadrature(dim, radius, order=48):
    nodes, weights = leggauss(order)
    nodes = nodes * radius
    weights = weights * radius
    mesh = np.stack(np.meshgrid(*([nodes] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    w = np.ones(len(mesh))
    for axis_weights in np.meshgrid(*([weights] * dim), indexing="ij"):
        w = w * axis_weights.ravel()
    return mesh, w


def kernel_integral(V):
    """Quadrature value of the integral of V over R^d."""
    if V.radial:
        omega = sphere_area(V.dim)
        breaks = [V.support_radius * (1.0 - V.taper)] if V.profile == "bump" else None
        value, _ = integrate.quad(
            lambda r: omega * r ** (V.dim - 1) * float(V.radial_value(r)),
            0.0,
            V.support_radius,
            points=breaks,
            epsabs=1e-14,
            epsrel=1e-13,
            limit=200,
        )
        return value
    points, weights = _tensor_quadrature(V.dim, V.support_radius)
    return float(np.dot(kernel_eval(V, points), weights))


def kernel_normalize(V):
    """Rescale V so that its quadrature integral is one."""
    if V.radial:
        samples = V.radial_value(np.linspace(0.0, V.support_radius, 257))
    else:
        samples = kernel_eval(V, _tensor_quadrature(V.dim, V.support_radius, order=16)[0])
    if np.any(samples < 0):
        raise ValueError("kernel profile takes negative values")
    total = kernel_integral(V)
    if total <= 0:
        raise ValueError("kernel profile integrates to zero")
    scaled = KernelV(
        dim=V.dim,
        support_radius=V.support_radius,
        profile=V.profile,
        taper=V.taper,
        scale=V.scale / total,
        function=V.function,
    )
    norm = kernel_integral(scaled)
    logger.debug("normalized kernel %s: raw integral %.12g, normalized %.15g", V.profile, total, norm)
    return KernelV(
        dim=scaled.dim,
        support_radius=scaled.support_radius,
        profile=scaled.profile,
        taper=scaled.taper,
        scale=scaled.scale,
        normalization=norm,
        function=scaled.function,
    )


def make_kernel(dim, profile="bump", support_radius=1.0, taper=DEFAULT_TAPER):
    return kernel_normalize(KernelV(dim=dim, support_radius=support_radius, profile=profile, taper=taper))


# ==============================
# Rate and diffusion policies
# ==============================

@dataclass(frozen=True)
class RatePolicy:
    """Microscopic coagulation propensities alpha(n, m)."""
    kind: str = "constant"
    c: float = 1.0
    table: Optional[Tuple[Tuple[float, ...], ...]] = None

    def __post_init__(self):
        if self.kind not in RATE_KINDS:
            raise ValueError(f"unknown rate kind {self.kind!r}")
        if self.c < 0:
            raise ValueError("alpha must be nonnegative")
        if self.kind == "table":
            if not self.table:
                raise ValueError("a table rate policy needs a table")
            values = np.asarray(self.table, dtype=float)
            if values.ndim != 2 or values.shape[0] != values.shape[1]:
                raise ValueError("alpha table must be square")
            if np.any(values < 0):
                raise ValueError("alpha table has negative entries")
            if not np.array_equal(values, values.T):
                bad = np.argwhere(values != values.T)[0] + 1
                raise ValueError(f"alpha table is not symmetric at ({bad[0]}, {bad[1]})")

    @property
    def table_size(self):
        return len(self.table) if self.table else None

    def evaluate(self, n, m):
        """Vectorized alpha; table entries beyond the table are clamped to its edge."""
        n = np.asarray(n)
        m = np.asarray(m)
        if self.kind == "constant":
            return np.full(np.broadcast(n, m).shape, float(self.c))
        if self.kind == "product":
            return self.c * n.astype(float) * m.astype(float)
        values = np.asarray(self.table, dtype=float)
        size = values.shape[0]
        return values[np.clip(n, 1, size) - 1, np.clip(m, 1, size) - 1]

    def __call__(self, n, m):
        value = self.evaluate(n, m)
        return float(value) if np.ndim(value) == 0 else value

    def is_symmetric(self, m_max):
        grid = np.arange(1, m_max + 1)
        values = self.evaluate(grid[:, None], grid[None, :])
        return bool(np.array_equal(values, values.T))


@dataclass(frozen=True)
class DiffusionPolicy:
    """d(n): one-half the diffusion rate of a mass-n particle."""
    kind: str = "constant"
    c: float = 0.5
    exponent: float = 0.0
    table: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in DIFFUSION_KINDS:
            raise ValueError(f"unknown diffusion kind {self.kind!r}")
        if self.kind == "table":
            if not self.table:
                raise ValueError("a table diffusion policy needs a table")
            if min(self.table) <= 0:
                raise ValueError("diffusion rates must be positive")
        elif self.c <= 0:
            raise ValueError("diffusion rates must be positive")

    def evaluate(self, n):
        n = np.asarray(n)
        if self.kind == "constant":
            return np.full(n.shape, float(self.c))
        if self.kind == "power":
            return self.c * n.astype(float) ** self.exponent
        values = np.asarray(self.table, dtype=float)
        return values[np.clip(n, 1, len(values)) - 1]

    def __call__(self, n):
        value = self.evaluate(n)
        return float(value) if np.ndim(value) == 0 else value


@dataclass(frozen=True)
class CoagulationModel:
    """The microscopic law: kernel, propensities, diffusion and mass cap."""
    kernel: KernelV
    alpha: RatePolicy
    diffusion: DiffusionPolicy
    m_max: int = DEFAULT_M_MAX

    def __post_init__(self):
        if self.m_max < 2:
            raise ValueError("m_max must be at least 2")

    @property
    def dim(self):
        return self.kernel.dim


# ==============================
# Initial densities h_n
# ==============================

@dataclass(frozen=True)
class DensityComponent:
    """Spatial density h_n of one mass class, with total intensity."""
    mass: int
    shape: str = "uniform"
    intensity: float = 1.0
    lo: Optional[Tuple[float, ...]] = None
    hi: Optional[Tuple[float, ...]] = None
    center: Optional[Tuple[float, ...]] = None
    sigma: float = 1.0
    values: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.mass < 1:
            raise ValueError("masses are positive integers")
        if self.shape not in DENSITY_SHAPES:
            raise ValueError(f"unknown density shape {self.shape!r}")
        if self.shape in ("uniform", "grid") and (self.lo is None or self.hi is None):
            raise ValueError(f"{self.shape} densities need lo/hi bounds")
        if self.shape == "gaussian":
            if self.center is None:
                raise ValueError("gaussian densities need a center")
            if self.sigma <= 0:
                raise ValueError("sigma must be positive")
        if self.shape == "grid":
            table = np.asarray(self.values, dtype=float)
            if table.ndim != len(self.lo) or np.any(table < 0):
                raise ValueError("grid density must be a nonnegative array matching the bounds")
            if np.any(np.array(table.shape) < 2):
                raise ValueError("grid density needs at least two nodes per axis")
        elif not (self.intensity >= 0 and math.isfinite(self.intensity)):
            raise ValueError("intensity must be finite and nonnegative")

    @property
    def dim(self):
        return len(self.lo if self.lo is not None else self.center)

    def _grid_axes(self):
        table = np.asarray(self.values, dtype=float)
        return [np.linspace(a, b, k) for a, b, k in zip(self.lo, self.hi, table.shape)]

    @property
    def total(self):
        """Integral of h_n; tables use the trapezoidal rule."""
        if self.shape != "grid":
            return float(self.intensity)
        result = np.asarray(self.values, dtype=float)
        for axis in reversed(self._grid_axes()):
            result = integrate.trapezoid(result, axis, axis=-1)
        return float(result)

    def density(self, x):
        """h_n at points x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if self.shape == "uniform":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            inside = np.all((x >= lo) & (x <= hi), axis=-1)
            return np.where(inside, self.intensity / np.prod(hi - lo), 0.0)
        if self.shape == "gaussian":
            d = x.shape[-1]
            r2 = np.sum((x - np.asarray(self.center)) ** 2, axis=-1)
            norm = (2.0 * math.pi * self.sigma ** 2) ** (-d / 2.0)
            return self.intensity * norm * np.exp(-0.5 * r2 / self.sigma ** 2)
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator(self._grid_axes(), np.asarray(self.values, dtype=float),
                                         bounds_error=False, fill_value=0.0)
        return interp(x)

    def sample(self, rng, count):
        """Draw ``count`` positions from h_n / integral(h_n)."""
        d = self.dim
        if count == 0:
            return np.empty((0, d))
        if self.shape == "uniform":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            return lo + (hi - lo) * rng.random((count, d))
        if self.shape == "gaussian":
            return np.asarray(self.center) + self.sigma * rng.standard_normal((count, d))
        # piecewise-constant cells weighted by their corner means
        table = np.asarray(self.values, dtype=float)
        cells = table
        for axis in range(d):
            cells = 0.5 * (np.take(cells, range(cells.shape[axis] - 1), axis=axis)
                           + np.take(cells, range(1, cells.shape[axis]), axis=axis))
        probs = cells.ravel() / cells.sum()
        picks = rng.choice(len(probs), size=count, p=probs)
        index = np.stack(np.unravel_index(picks, cells.shape), axis=-1)
        axes = self._grid_axes()
        lo = np.stack([axes[k][index[:, k]] for k in range(d)], axis=-1)
        width = np.array([axes[k][1] - axes[k][0] for k in range(d)])
        return lo + width * rng.random((count, d))


@dataclass(frozen=True)
class InitialDensities:
    components: Tuple[DensityComponent, ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("at least one density component is required")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError("density components disagree on dimension")

    @property
    def dim(self):
        return self.components[0].dim

    @property
    def big_z(self):
        return sum(c.total for c in self.components)

    @property
    def mass_intensity(self):
        """Integral of k = sum_n n h_n."""
        return sum(c.mass * c.total for c in self.components)

    def masses(self):
        return sorted({c.mass for c in self.components})

    def intensity_of(self, mass):
        return sum(c.total for c in self.components if c.mass == mass)

    def density(self, mass, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for c in self.components:
            if c.mass == mass:
                out = out + c.density(x)
        return out


# ==============================
# Parameter hypothesis
# ==============================

@dataclass(frozen=True)
class HypothesisReport:
    holds: bool
    worst_triple: Tuple[int, int, int]
    worst_ratio: float
    constant_alpha_equivalent: bool
    nonincreasing_d_equivalent: bool
    linear_growth: Tuple[float, ...] = ()


def check_hypothesis(gamma, dd, m_max, dim=3):
    """
    Evaluate n2 g(n1, n2+n3) max{1, r^{(3d-2)/2}, r^{2d-1}} <= (n2+n3) g(n1, n2)
    with r = d(n2+n3)/d(n2) over every triple with n2 + n3 <= m_max.

    Besides the worst ratio the report carries the two equivalent forms:
    whether d(n) n^{1/(2-3d)} is nonincreasing (the constant-rate form) and
    whether g(n, m)/m is nonincreasing in m (the nonincreasing-d form).
    """
    if m_max < 2:
        raise ValueError("m_max must be at least 2")
    worst_ratio = -math.inf
    worst_triple = (0, 0, 0)
    n1 = np.arange(1, m_max + 1)
    for n2 in range(1, m_max):
        n3 = np.arange(1, m_max - n2 + 1)
        total = n2 + n3
        r = dd.evaluate(total) / dd(n2)
        factor = np.maximum.reduce([np.ones_like(r), r ** ((3 * dim - 2) / 2.0), r ** (2 * dim - 1)])
        lhs = n2 * gamma.evaluate(n1[:, None], total[None, :]) * factor[None, :]
        rhs = total[None, :] * gamma.evaluate(n1[:, None], np.full((1, len(n3)), n2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
        # lexicographic tie-break: first (n1, n2, n3) reaching the maximum wins
        for i in range(len(n1)):
            j = int(np.argmax(ratio[i]))
            value = float(ratio[i, j])
            candidate = (int(n1[i]), n2, int(n3[j]))
            if value > worst_ratio or (value == worst_ratio and candidate < worst_triple):
                worst_ratio = value
                worst_triple = candidate
    masses = np.arange(1, m_max + 1)
    profile = dd.evaluate(masses) * masses.astype(float) ** (1.0 / (2 - 3 * dim))
    constant_alpha_equivalent = bool(np.all(np.diff(profile) <= 1e-12 * np.abs(profile[:-1])))
    per_m = gamma.evaluate(masses[:, None], masses[None, :]) / masses[None, :]
    nonincreasing_d_equivalent = bool(np.all(np.diff(per_m, axis=1) <= 1e-12 * np.abs(per_m[:, :-1])))
    report = HypothesisReport(
        holds=bool(worst_ratio <= 1.0 + 1e-12),
        worst_triple=worst_triple,
        worst_ratio=worst_ratio,
        constant_alpha_equivalent=constant_alpha_equivalent,
        nonincreasing_d_equivalent=nonincreasing_d_equivalent,
        linear_growth=tuple(float(v) for v in per_m.max(axis=1)),
    )
    logger.debug("hypothesis check up to %d: worst %s ratio %.6g", m_max, worst_triple, worst_ratio)
    return report


def check_hard_core_hypothesis(dd, m_max, dim=3):
    """The hard-core form: the same inequality with gamma identically one."""
    return check_hypothesis(RatePolicy("constant", 1.0), dd, m_max, dim)


def scaling_relation_holds(params_a, params_b):
    return math.isclose(
        params_a.n_particles * params_a.epsilon_power,
        params_b.n_particles * params_b.epsilon_power,
        rel_tol=SCALING_RTOL,
    )


