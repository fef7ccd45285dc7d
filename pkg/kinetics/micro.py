"""
The N-particle coagulation process: independent Brownian motions with
mass-dependent rates, plus pairwise coagulation at rate
eps^-2 V((x_i - x_j)/eps) alpha(m_i, m_j), merged at a mass-weighted parent
location.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate
from scipy.spatial import cKDTree

from .core import sphere_area
from .exceptions import ConservationError, OverflowBucketError
from .spatial import Domain, SpatialHash, detect_pairs

logger = logging.getLogger(__name__)


# ==============================
# State
# ==============================

@dataclass(frozen=True)
class CollisionEvent:
    t: float
    id_a: int
    id_b: int
    mass_a: int
    mass_b: int
    new_id: int
    new_pos: Tuple[float, ...]
    chose_first: bool

    @property
    def new_mass(self):
        return self.mass_a + self.mass_b

    def as_dict(self):
        return {
            "t": self.t,
            "id_a": self.id_a,
            "id_b": self.id_b,
            "masses": [self.mass_a, self.mass_b],
            "new_id": self.new_id,
            "new_pos": list(self.new_pos),
            "chose_first": self.chose_first,
        }


class Configuration:
    """
    Particles stored column-wise: ``ids``, ``positions`` (n, d), ``masses``.
    Ids are never reused; merged particles get ``next_id``.
    """

    def __init__(self, positions, masses, ids=None, time=0.0, epsilon=1.0, domain=Domain(), next_id=None):
        self.positions = np.asarray(positions, dtype=float)
        self.masses = np.asarray(masses, dtype=np.int64).reshape(-1)
        if self.positions.ndim != 2 or len(self.positions) != len(self.masses):
            raise ValueError("positions must have shape (n, d) matching the masses")
        self.ids = np.arange(len(self.masses), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(self.ids) != len(self.masses):
            raise ValueError("ids and masses differ in length")
        if np.any(self.masses < 1):
            raise ValueError("masses are positive integers")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("particle ids must be unique")
        self.time = float(time)
        self.epsilon = float(epsilon)
        self.domain = domain
        self.next_id = int(next_id if next_id is not None else (self.ids.max() + 1 if len(self.ids) else 0))
        self.positions = domain.wrap(self.positions)

    def __len__(self):
        return len(self.masses)

    @property
    def count(self):
        return len(self.masses)

    @property
    def dim(self):
        return self.positions.shape[1]

    @property
    def total_mass(self):
        return int(self.masses.sum())

    def index_of(self, particle_id):
        found = np.flatnonzero(self.ids == particle_id)
        if len(found) == 0:
            raise ValueError(f"particle {particle_id} is not alive")
        return int(found[0])

    def mass_counts(self, m_max):
        """Counts of masses 1..m_max; the last entry aggregates the overflow bucket."""
        counts = np.bincount(np.minimum(self.masses, m_max + 1), minlength=m_max + 2)
        return counts[1:]

    def overflow_count(self, m_max):
        return int(np.count_nonzero(self.masses > m_max))

    def copy(self):
        return Configuration(
            self.positions.copy(), self.masses.copy(), self.ids.copy(),
            self.time, self.epsilon, self.domain, self.next_id,
        )

    def as_record(self):
        return {
            "t": self.time,
            "next_id": self.next_id,
            "ids": self.ids.tolist(),
            "masses": self.masses.tolist(),
            "positions": self.positions.tolist(),
        }

    @classmethod
    def from_record(cls, row, dim, epsilon=1.0, domain=Domain()):
        positions = np.asarray(row["positions"], dtype=float).reshape(-1, dim)
        return cls(positions, row["masses"], row["ids"], row["t"], epsilon, domain, row["next_id"])

    def digest(self):
        """SHA-256 over ids, masses and positions."""
        sha = hashlib.sha256()
        sha.update(np.ascontiguousarray(self.ids).tobytes())
        sha.update(np.ascontiguousarray(self.masses).tobytes())
        sha.update(np.ascontiguousarray(self.positions).tobytes())
        return sha.hexdigest()


def sample_initial(densities, params, rng, domain=Domain(), n_particles=None):
    """
    N i.i.d. draws from h_n(x)/Z on R^d x N: mass first, with probability
    (integral h_n)/Z, then position from h_n.
    """
    if abs(densities.big_z - params.big_z) > 1e-9 * params.big_z:
        raise ValueError(f"densities carry Z = {densities.big_z!r}, parameters Z = {params.big_z!r}")
    if densities.dim != params.dim:
        raise ValueError("densities and parameters disagree on dimension")
    count = params.n_particles if n_particles is None else int(n_particles)
    weights = np.array([c.total for c in densities.components])
    if not np.all(np.isfinite(weights)):
        raise ValueError("a density component has an undefined integral")
    labels = rng.choice(len(weights), size=count, p=weights / weights.sum())
    positions = np.empty((count, params.dim))
    masses = np.empty(count, dtype=np.int64)
    for k, component in enumerate(densities.components):
        chosen = np.flatnonzero(labels == k)
        positions[chosen] = component.sample(rng, len(chosen))
        masses[chosen] = component.mass
    return Configuration(positions, masses, epsilon=params.epsilon, domain=domain)


# ==============================
# Dynamics
# ==============================

def diffuse(cfg, tau, rng, dd):
    """Add N(0, 2 d(m) tau) to every coordinate of every particle."""
    if tau < 0:
        raise ValueError("time step cannot be negative")
    if tau == 0 or cfg.count == 0:
        return cfg
    scale = np.sqrt(2.0 * dd.evaluate(cfg.masses) * tau)
    cfg.positions = cfg.domain.wrap(cfg.positions + scale[:, None] * rng.standard_normal(cfg.positions.shape))
    return cfg


def interaction_range(model, epsilon):
    return model.kernel.support_radius * epsilon


def pair_rates(cfg, pairs, model):
    """eps^-2 V((x_i - x_j)/eps) alpha(m_i, m_j) for each index pair."""
    if len(pairs) == 0:
        return np.empty(0)
    eps = cfg.epsilon
    diff = cfg.domain.displacement(cfg.positions[pairs[:, 0]], cfg.positions[pairs[:, 1]])
    v = model.kernel(diff / eps) / eps ** 2
    return v * model.alpha.evaluate(cfg.masses[pairs[:, 0]], cfg.masses[pairs[:, 1]])


def find_pairs(cfg, model, spatial_hash=None):
    cutoff = interaction_range(model, cfg.epsilon)
    spatial_hash = spatial_hash or SpatialHash(cutoff, cfg.domain)
    spatial_hash.rebuild(cfg.positions)
    return detect_pairs(cfg.positions, spatial_hash, cutoff)


def merge(cfg, id_a, id_b, rng):
    """
    Replace particles a and b by one of mass m_a + m_b placed at x_a with
    probability m_a / (m_a + m_b), otherwise at x_b.
    """
    if id_a == id_b:
        raise ValueError("a particle cannot merge with itself")
    first = np.array([cfg.index_of(id_a)])
    second = np.array([cfg.index_of(id_b)])
    return merge_pairs(cfg, first, second, rng)[0]


def merge_pairs(cfg, first, second, rng):
    """
    Merge disjoint index pairs in one pass. Survivors keep their order and
    the merged particles are appended in pair order, with consecutive ids.
    """
    if len(first) == 0:
        return []
    mass_a, mass_b = cfg.masses[first], cfg.masses[second]
    chose_first = rng.random(len(first)) < mass_a / (mass_a + mass_b)
    new_pos = np.where(chose_first[:, None], cfg.positions[first], cfg.positions[second])
    new_ids = cfg.next_id + np.arange(len(first), dtype=np.int64)
    old_a, old_b = cfg.ids[first], cfg.ids[second]
    keep = np.ones(cfg.count, dtype=bool)
    keep[first] = False
    keep[second] = False
    if keep.sum() != cfg.count - 2 * len(first):
        raise ValueError("merged pairs must be disjoint")
    cfg.next_id += len(first)
    cfg.ids = np.concatenate([cfg.ids[keep], new_ids])
    cfg.masses = np.concatenate([cfg.masses[keep], mass_a + mass_b])
    cfg.positions = np.concatenate([cfg.positions[keep], new_pos])
    return [
        CollisionEvent(
            t=cfg.time,
            id_a=int(old_a[k]),
            id_b=int(old_b[k]),
            mass_a=int(mass_a[k]),
            mass_b=int(mass_b[k]),
            new_id=int(new_ids[k]),
            new_pos=tuple(float(c) for c in new_pos[k]),
            chose_first=bool(chose_first[k]),
        )
        for k in range(len(first))
    ]


def coagulate_step(cfg, tau, rng, model, pairs=None, rates=None):
    """
    Visit the candidate pairs in uniformly random order; each coagulates with
    probability 1 - exp(-tau * rate). Pairs with a member already consumed in
    this step are skipped. The surviving merges are applied together.
    """
    if pairs is None:
        pairs = find_pairs(cfg, model)
    if rates is None:
        rates = pair_rates(cfg, pairs, model)
    if len(pairs) == 0:
        return cfg, []
    order = rng.permutation(len(pairs))
    draws = rng.random(len(pairs))
    accepted = draws < -np.expm1(-tau * rates[order])
    consumed = np.zeros(cfg.count, dtype=bool)
    chosen = []
    for a, b in pairs[order[accepted]].tolist():
        if consumed[a] or consumed[b]:
            continue
        consumed[a] = consumed[b] = True
        chosen.append((a, b))
    if not chosen:
        return cfg, []
    chosen = np.asarray(chosen, dtype=np.int64)
    return cfg, merge_pairs(cfg, chosen[:, 0], chosen[:, 1], rng)


# ==============================
# Run statistics and observers
# ==============================

@dataclass
class Snapshot:
    t: float
    digest: str
    configuration: Optional[Configuration] = field(default=None, repr=False)


@dataclass
class TrajectoryStats:
    initial_count: int
    initial_mass: int
    epsilon_power: float
    horizon: float = 0.0
    collision_count: int = 0
    rate_integral: float = 0.0
    compensator: float = 0.0
    steps: int = 0
    final_count: Optional[int] = None
    final_mass: Optional[int] = None
    overflow_count: int = 0
    q_series: List[Tuple[float, float]] = field(default_factory=list)
    overlap_series: List[Tuple[float, float]] = field(default_factory=list)
    snapshots: List[Snapshot] = field(default_factory=list)
    counts: List[Tuple[float, Tuple[int, ...]]] = field(default_factory=list)
    densities: Dict[int, List[Tuple[float, np.ndarray]]] = field(default_factory=dict)
    functionals: List[Tuple[float, int, float]] = field(default_factory=list)
    events: List[CollisionEvent] = field(default_factory=list)

    @property
    def collisions_per_particle(self):
        """Collisions per initial particle per unit time."""
        if self.horizon == 0 or self.initial_count == 0:
            return 0.0
        return self.collision_count / (self.initial_count * self.horizon)

    @property
    def scaled_collisions(self):
        """eps^{d-2} times the collision count; its mean matches the compensator."""
        return self.epsilon_power * self.collision_count

    def summary(self):
        return {
            "initial_count": self.initial_count,
            "final_count": self.final_count,
            "initial_mass": self.initial_mass,
            "final_mass": self.final_mass,
            "collision_count": self.collision_count,
            "rate_integral": self.rate_integral,
            "compensator": self.compensator,
            "scaled_collisions": self.scaled_collisions,
            "collisions_per_particle": self.collisions_per_particle,
            "overflow_count": self.overflow_count,
            "steps": self.steps,
            "horizon": self.horizon,
        }


class Observer:
    """Called after step 0, every ``every`` steps and after the last step."""

    def __init__(self, every=1):
        if every < 1:
            raise ValueError("observer interval must be at least one step")
        self.every = int(every)

    def due(self, step, final):
        return final or step % self.every == 0

    def observe(self, cfg, stats):
        raise NotImplementedError


class TimedObserver(Observer):
    """Fires at fixed times; run() lands on each of them exactly."""

    def __init__(self, times):
        super().__init__(1)
        self.times = sorted(times)

    def due(self, step, final):
        return True

    def hit(self, cfg, times=None):
        for t in self.times if times is None else times:
            if abs(cfg.time - t) <= 1e-12 * max(1.0, t):
                return t
        return None


class SnapshotObserver(TimedObserver):
    """Digest of the configuration at each time, plus a full copy at the ``keep_at`` times."""

    def __init__(self, times, keep_at=None):
        super().__init__(times)
        self.keep_at = self.times if keep_at is None else sorted(keep_at)

    def observe(self, cfg, stats):
        if self.hit(cfg) is None:
            return
        kept = cfg.copy() if self.hit(cfg, self.keep_at) is not None else None
        stats.snapshots.append(Snapshot(cfg.time, cfg.digest(), kept))


class CountObserver(Observer):
    def __init__(self, m_max, every=1):
        super().__init__(every)
        self.m_max = m_max

    def observe(self, cfg, stats):
        stats.counts.append((cfg.time, tuple(int(c) for c in cfg.mass_counts(self.m_max))))


class PropensityObserver(Observer):
    """
    Samples Q(0) for the mass pair (m1, m2) and, when ``delta`` is set, the
    matching integral of f^delta_m1 J f^delta_m2 Jbar.
    """

    def __init__(self, model, m1, m2, j=None, jbar=None, every=1, delta=None):
        super().__init__(every)
        self.model = model
        self.m1, self.m2 = m1, m2
        self.j, self.jbar = j, jbar
        self.delta = delta
        self.mollifier = None

    def observe(self, cfg, stats):
        stats.q_series.append((cfg.time, q_statistic(cfg, self.model, self.m1, self.m2, self.j, self.jbar)))
        if self.delta:
            self.mollifier = self.mollifier or Mollifier(cfg.dim)
            value = mollified_overlap(cfg, self.m1, self.m2, self.delta, self.j, self.jbar, self.mollifier)
            stats.overlap_series.append((cfg.time, value))


class DensityObserver(TimedObserver):
    """Samples the mollified empirical density of each mass on a grid."""

    def __init__(self, masses, delta, grid, times, mollifier=None):
        super().__init__(times)
        self.masses = tuple(masses)
        self.delta = delta
        self.grid = grid
        self.mollifier = mollifier or Mollifier(grid.dim)

    def observe(self, cfg, stats):
        t = self.hit(cfg)
        if t is None:
            return
        for n in self.masses:
            field_values = empirical_density(cfg, n, self.delta, self.grid, self.mollifier)
            stats.densities.setdefault(n, []).append((t, field_values))


class FunctionalObserver(TimedObserver):
    """Records eps^{d-2} sum J(x_i) over the mass-n particles."""

    def __init__(self, functional, masses, times):
        super().__init__(times)
        self.functional = functional
        self.masses = tuple(masses)

    def observe(self, cfg, stats):
        t = self.hit(cfg)
        if t is None:
            return
        for n in self.masses:
            stats.functionals.append((t, n, micro_functional(cfg, self.functional, n)))


def micro_functional(cfg, functional, n):
    chosen = cfg.masses == n
    if not np.any(chosen):
        return 0.0
    return float(cfg.epsilon ** (cfg.dim - 2) * np.sum(functional(cfg.positions[chosen], n)))


def _time_grid(params, extra_times=()):
    """Step end times: multiples of tau, the horizon, and any requested sample times."""
    times = [min(k * params.tau, params.horizon) for k in range(1, params.n_steps + 1)]
    times.extend(t for t in extra_times if 0 < t < params.horizon)
    return sorted(set(times))


def run(cfg, params, model, rng, observers=(), overflow_fraction=1.0, sample_times=()):
    """
    Alternate diffuse and coagulate_step up to the horizon.

    Each step adds dt * eps^{d-2} * (sum of the pair rates) to the rate
    integral, and eps^{d-2} times the summed firing probabilities
    1 - exp(-dt * rate) to the compensator. Only the compensator has the
    scaled collision count as its mean; the rate integral is the quantity
    bounded by Z.
    """
    stats = TrajectoryStats(
        initial_count=cfg.count,
        initial_mass=cfg.total_mass,
        epsilon_power=params.epsilon_power,
        horizon=params.horizon,
    )
    for observer in observers:
        observer.observe(cfg, stats)
    cutoff = interaction_range(model, params.epsilon)
    spatial_hash = SpatialHash(cutoff, cfg.domain)
    times = _time_grid(params, sample_times)
    for step, t_next in enumerate(times, start=1):
        dt = t_next - cfg.time
        diffuse(cfg, dt, rng, model.diffusion)
        cfg.time = t_next
        pairs = find_pairs(cfg, model, spatial_hash)
        rates = pair_rates(cfg, pairs, model)
        stats.rate_integral += dt * params.epsilon_power * float(rates.sum())
        stats.compensator += params.epsilon_power * float(-np.expm1(-dt * rates).sum())
        cfg, events = coagulate_step(cfg, dt, rng, model, pairs, rates)
        stats.events.extend(events)
        stats.collision_count += len(events)
        stats.steps = step
        overflow = cfg.overflow_count(model.m_max)
        if overflow > overflow_fraction * stats.initial_count:
            raise OverflowBucketError(
                f"{overflow} particles above m_max={model.m_max} at t={cfg.time:g}"
            )
        final = step == len(times)
        for observer in observers:
            if observer.due(step, final):
                observer.observe(cfg, stats)
    stats.final_mass = cfg.total_mass
    if stats.final_mass != stats.initial_mass:
        raise ConservationError(f"total mass moved from {stats.initial_mass} to {cfg.total_mass}")
    stats.final_count = cfg.count
    stats.overflow_count = cfg.overflow_count(model.m_max)
    logger.debug(
        "micro run: %d steps, %d collisions, rate integral %.6g, %d particles left",
        stats.steps, stats.collision_count, stats.rate_integral, stats.final_count,
    )
    return stats


# ==============================
# Empirical measures
# ==============================

@dataclass(frozen=True)
class Mollifier:
    """Radial bump exp(-1/(1 - r^2)) on the unit ball, unit integral."""
    dim: int

    @cached_property
    def normalization(self):
        omega = sphere_area(self.dim)
        value, _ = integrate.quad(
            lambda r: omega * r ** (self.dim - 1) * np.exp(-1.0 / (1.0 - r * r)),
            0.0, 1.0, epsabs=1e-14, epsrel=1e-13,
        )
        return value

    def profile(self, rho):
        rho = np.asarray(rho, dtype=float)
        inside = rho < 1.0
        safe = np.where(inside, rho, 0.0)
        return np.where(inside, np.exp(-1.0 / (1.0 - safe * safe)), 0.0)

    def scaled(self, distance, delta):
        """eta^delta at the given distances."""
        return self.profile(np.asarray(distance) / delta) / (self.normalization * delta ** self.dim)

    @cached_property
    def _overlap_table(self):
        # eta * eta at separation s in [0, 2], by Gauss-Legendre in (r, cos angle)
        nodes, weights = leggauss(96)
        r = 0.5 * (nodes + 1.0)
        wr = 0.5 * weights
        t, wt = nodes, weights
        separations = np.linspace(0.0, 2.0, 513)
        jacobian = r[:, None] ** (self.dim - 1) * (1.0 - t[None, :] ** 2) ** ((self.dim - 3) / 2.0)
        base = self.profile(r)[:, None] * jacobian * wr[:, None] * wt[None, :]
        values = np.empty(len(separations))
        for k, s in enumerate(separations):
            other = np.sqrt(np.maximum(r[:, None] ** 2 + s * s - 2.0 * r[:, None] * s * t[None, :], 0.0))
            values[k] = np.sum(base * self.profile(other))
        values *= sphere_area(self.dim - 1) / self.normalization ** 2
        return separations, values

    def overlap(self, distance, delta):
        """Integral of eta^delta(x - a) eta^delta(x - b) dx for |a - b| = distance."""
        separations, values = self._overlap_table
        scaled = np.asarray(distance, dtype=float) / delta
        return np.interp(scaled, separations, values, right=0.0) / delta ** self.dim


@dataclass(frozen=True)
class DensityGrid:
    """
    Tensor grid for density fields. Periodic grids omit the upper endpoint
    and integrate by plain sums; others integrate by the trapezoidal rule.
    """
    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    shape: Tuple[int, ...]
    periodic: bool = False

    def __post_init__(self):
        if not len(self.lo) == len(self.hi) == len(self.shape):
            raise ValueError("grid bounds and shape disagree on dimension")
        if any(b <= a for a, b in zip(self.lo, self.hi)) or min(self.shape) < 2:
            raise ValueError("grid must have positive extent and two nodes per axis")

    @classmethod
    def for_domain(cls, domain, dim, points, lo=None, hi=None):
        if domain.periodic:
            return cls((0.0,) * dim, (domain.side,) * dim, (points,) * dim, True)
        return cls(tuple(lo), tuple(hi), (points,) * dim, False)

    @property
    def dim(self):
        return len(self.shape)

    @property
    def axes(self):
        if self.periodic:
            return [a + (b - a) * np.arange(n) / n for a, b, n in zip(self.lo, self.hi, self.shape)]
        return [np.linspace(a, b, n) for a, b, n in zip(self.lo, self.hi, self.shape)]

    @property
    def nodes(self):
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.dim)

    def integrate(self, values):
        values = np.asarray(values, dtype=float).reshape(self.shape)
        if self.periodic:
            cell = np.prod([(b - a) / n for a, b, n in zip(self.lo, self.hi, self.shape)])
            return float(values.sum() * cell)
        result = values
        for axis in reversed(self.axes):
            result = integrate.trapezoid(result, axis, axis=-1)
        return float(result)


def empirical_density(cfg, n, delta, grid, mollifier=None):
    """f^delta(n, x) = eps^{d-2} sum over mass-n particles of eta^delta(x - x_i), on the grid."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    mollifier = mollifier or Mollifier(cfg.dim)
    chosen = cfg.positions[cfg.masses == n]
    values = np.zeros(int(np.prod(grid.shape)))
    if len(chosen) == 0:
        return values.reshape(grid.shape)
    boxsize = None
    if cfg.domain.periodic:
        if not grid.periodic:
            raise ValueError("torus configurations need a periodic grid")
        if delta >= cfg.domain.side / 2:
            raise ValueError("delta must be below half the torus side")
        boxsize = cfg.domain.side
    grid_tree = cKDTree(grid.nodes, boxsize=boxsize)
    particle_tree = cKDTree(chosen, boxsize=boxsize)
    near = grid_tree.sparse_distance_matrix(particle_tree, delta, output_type="ndarray")
    weights = mollifier.scaled(near["v"], delta)
    values += np.bincount(near["i"], weights=weights, minlength=len(values))
    return (cfg.epsilon ** (cfg.dim - 2) * values).reshape(grid.shape)


def q_statistic(cfg, model, m1, m2, j=None, jbar=None, pairs=None):
    """
    Q(0) = eps^{d-2} sum over ordered pairs i != j of
    V_eps(x_i - x_j) alpha(m_i, m_j) J(x_i) Jbar(x_j) 1{m_i = m1, m_j = m2}.
    """
    if cfg.count < 2:
        return 0.0
    if pairs is None:
        pairs = find_pairs(cfg, model)
    if len(pairs) == 0:
        return 0.0
    rates = pair_rates(cfg, pairs, model)
    total = 0.0
    for first, second in ((pairs[:, 0], pairs[:, 1]), (pairs[:, 1], pairs[:, 0])):
        hit = (cfg.masses[first] == m1) & (cfg.masses[second] == m2)
        if not np.any(hit):
            continue
        left = np.ones(hit.sum()) if j is None else j(cfg.positions[first[hit]])
        right = np.ones(hit.sum()) if jbar is None else jbar(cfg.positions[second[hit]])
        total += float(np.sum(rates[hit] * left * right))
    return cfg.epsilon ** (cfg.dim - 2) * total


def mollified_overlap(cfg, m1, m2, delta, j=None, jbar=None, mollifier=None):
    """
    Integral of f^delta_m1 J f^delta_m2 Jbar over space, summed exactly over
    particle pairs (self pairs included) with J and Jbar taken at the
    particle positions.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    mollifier = mollifier or Mollifier(cfg.dim)
    first = np.flatnonzero(cfg.masses == m1)
    second = np.flatnonzero(cfg.masses == m2)
    if len(first) == 0 or len(second) == 0:
        return 0.0
    boxsize = None
    if cfg.domain.periodic:
        if delta >= cfg.domain.side / 4:
            raise ValueError("delta must be below a quarter of the torus side")
        boxsize = cfg.domain.side
    left_tree = cKDTree(cfg.positions[first], boxsize=boxsize)
    right_tree = cKDTree(cfg.positions[second], boxsize=boxsize)
    neighbours = left_tree.query_ball_tree(right_tree, 2.0 * delta)
    rows = np.repeat(np.arange(len(first)), [len(n) for n in neighbours])
    cols = np.fromiter((k for n in neighbours for k in n), dtype=np.int64, count=len(rows))
    if len(rows) == 0:
        return 0.0
    diff = cfg.domain.displacement(cfg.positions[first[rows]], cfg.positions[second[cols]])
    distance = np.linalg.norm(diff, axis=1)
    left = np.ones(len(first)) if j is None else j(cfg.positions[first])
    right = np.ones(len(second)) if jbar is None else jbar(cfg.positions[second])
    weights = mollifier.overlap(distance, delta) * left[rows] * right[cols]
    return cfg.epsilon ** (2 * (cfg.dim - 2)) * float(weights.sum())
