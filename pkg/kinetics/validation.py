"""
Quantitative checks tying the particle system, the cell problem and the
Smoluchowski solver together.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import integrate

from .exceptions import ConfigMismatchError, FitError, InsufficientReplicasError
from .micro import micro_functional

logger = logging.getLogger(__name__)

FUNCTIONAL_KINDS = ("constant", "gaussian", "box")
MIN_REPLICAS = 5
MIN_FIT_COLLISIONS = 100
EARLY_WINDOW = 0.1


@dataclass(frozen=True)
class CheckOutcome:
    """One PASS/FAIL line of a validation report."""
    name: str
    passed: bool
    value: Optional[float] = None
    threshold: Optional[float] = None
    details: Dict = field(default_factory=dict)

    @property
    def verdict(self):
        return "PASS" if self.passed else "FAIL"

    def as_dict(self):
        return asdict(self) | {"verdict": self.verdict}


# ==============================
# Test functions
# ==============================

@dataclass(frozen=True)
class TestFunctional:
    """
    Bounded test function J(x, n). ``box`` is a tanh-smoothed indicator of
    [lo, hi]; ``mass`` restricts J to one mass class.
    """
    kind: str = "constant"
    amplitude: float = 1.0
    center: Optional[Tuple[float, ...]] = None
    width: float = 1.0
    lo: Optional[Tuple[float, ...]] = None
    hi: Optional[Tuple[float, ...]] = None
    sharpness: float = 0.05
    mass: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if not math.isfinite(self.amplitude):
            raise ValueError("test functions must be bounded")
        if self.kind == "gaussian" and (self.center is None or self.width <= 0):
            raise ValueError("gaussian test functions need a center and a positive width")
        if self.kind == "box" and (self.lo is None or self.hi is None or self.sharpness <= 0):
            raise ValueError("box test functions need lo/hi and a positive sharpness")

    @property
    def sup_norm(self):
        return abs(self.amplitude)

    def __call__(self, x, n=None):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        if self.mass is not None and n is not None and n != self.mass:
            return np.zeros(shape)
        if self.kind == "constant":
            return np.full(shape, float(self.amplitude))
        if self.kind == "gaussian":
            r2 = np.sum((x - np.asarray(self.center)) ** 2, axis=-1)
            return self.amplitude * np.exp(-0.5 * r2 / self.width ** 2)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        edges = 0.5 * (np.tanh((x - lo) / self.sharpness) - np.tanh((x - hi) / self.sharpness))
        return self.amplitude * np.prod(edges, axis=-1)


def macro_functional(field_state, functional, n, side=None, points=32):
    """Integral of J(x, n) f_n(x) dx for a macro state."""
    f_n = field_state.f[n - 1]
    if field_state.mode == "spatial":
        grid = field_state.grid
        weights = functional(grid.nodes, n).reshape(grid.shape)
        return float(grid.integrate(weights * f_n))
    if functional.kind == "constant":
        j = functional(np.zeros((1, 1)), n)[0]
        return float(j * f_n * field_state.volume)
    if side is None:
        raise ValueError("homogeneous states need the box side to integrate J")
    dim = len(functional.center if functional.center is not None else functional.lo)
    axis = side * np.arange(points) / points
    nodes = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return float(np.mean(functional(nodes, n)) * side ** dim * f_n)


# ==============================
# Micro-macro functional
# ==============================

@dataclass(frozen=True)
class ComparisonRow:
    n: int
    t: float
    micro: float
    macro: float
    error: float
    spread: float
    replicas: int
    metadata: Dict = field(default_factory=dict)

    @property
    def relative_error(self):
        return abs(self.micro - self.macro) / abs(self.macro) if self.macro else math.inf


def require_same_physics(*hashes):
    known = {h for h in hashes if h}
    if len(known) > 1:
        raise ConfigMismatchError(f"artifacts come from different physics: {sorted(known)}")


def comparison_row(micro_values, macro_value, n, t, metadata=None):
    values = np.asarray(micro_values, dtype=float)
    if len(values) == 0:
        raise InsufficientReplicasError("no micro replicas to compare")
    return ComparisonRow(
        n=n,
        t=t,
        micro=float(values.mean()),
        macro=float(macro_value),
        error=float(np.mean(np.abs(values - macro_value))),
        spread=float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        replicas=len(values),
        metadata=dict(metadata or {}),
    )


def theorem1_functional(snapshots, macro_traj, functional, n, t, physics_hashes=(), side=None):
    """
    Micro value eps^{d-2} sum J over mass-n particles, per replica snapshot,
    against the macro integral of J f_n at time t.
    """
    require_same_physics(*physics_hashes)
    for cfg in snapshots:
        if not math.isclose(cfg.time, t, rel_tol=1e-12, abs_tol=1e-12):
            raise ConfigMismatchError(f"snapshot at t={cfg.time!r} compared at t={t!r}")
    macro_value = macro_functional(macro_traj.at(t), functional, n, side)
    micro_values = [micro_functional(cfg, functional, n) for cfg in snapshots]
    metadata = {}
    if snapshots:
        metadata = {"n_particles": snapshots[0].count, "epsilon": snapshots[0].epsilon}
    return comparison_row(micro_values, macro_value, n, t, metadata)


def improvement_count(pairings):
    """
    pairings: sequence of (small-N errors, large-N errors). A pairing
    improves when the large-N median error is strictly below the small-N one.
    """
    return sum(1 for small, large in pairings if np.median(large) < np.median(small))


def convergence_check(pairings, required=0.8):
    total = len(pairings)
    if total == 0:
        raise InsufficientReplicasError("no paired runs to compare")
    count = improvement_count(pairings)
    return CheckOutcome(
        "convergence", count >= required * total, float(count), required * total,
        {"pairings": total},
    )


# ==============================
# Stosszahlansatz
# ==============================

@dataclass(frozen=True)
class StosszahlDiagnostic:
    lhs: float
    rhs: float

    @property
    def gap(self):
        if self.lhs == 0:
            return 0.0 if self.rhs == 0 else math.inf
        return abs(self.lhs - self.rhs) / abs(self.lhs)


def time_integral(series):
    """Trapezoidal integral of (t, value) samples."""
    if len(series) < 2:
        return 0.0
    times = np.array([t for t, _ in series])
    values = np.array([v for _, v in series])
    return float(integrate.trapezoid(values, times))


def pair_density_integral(densities_a, densities_b, grid, j=None, jbar=None):
    """
    Time integral of the grid integral of (f_a J)(f_b Jbar), from two series
    of (t, field) samples taken at the same times.
    """
    if len(densities_a) != len(densities_b):
        raise ValueError("density series differ in length")
    nodes = grid.nodes
    left = np.ones(len(nodes)) if j is None else j(nodes)
    right = np.ones(len(nodes)) if jbar is None else jbar(nodes)
    weight = (left * right).reshape(grid.shape)
    series = []
    for (t_a, f_a), (t_b, f_b) in zip(densities_a, densities_b):
        if not math.isclose(t_a, t_b, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("density series are sampled at different times")
        series.append((t_a, grid.integrate(f_a * f_b * weight)))
    return time_integral(series)


def stosszahlansatz_check(stats, beta, m1, m2, grid=None, j=None, jbar=None, tau=None):
    """
    LHS: time integral of the sampled Q(0). RHS: beta(m1, m2) times the time
    integral of the space integral of f^delta_m1 J f^delta_m2 Jbar, taken
    from the exact pair sums when the run recorded them, otherwise from
    density grids.
    """
    if tau is not None and len(stats.q_series) > 1:
        gaps = np.diff([t for t, _ in stats.q_series])
        if gaps.max() > 10 * tau * (1 + 1e-9):
            raise ValueError("Q(0) must be sampled at least every 10 time steps")
    lhs = time_integral(stats.q_series)
    if stats.overlap_series:
        rhs = beta * time_integral(stats.overlap_series)
    else:
        if grid is None:
            raise ValueError("a density grid is needed without recorded pair overlaps")
        rhs = beta * pair_density_integral(stats.densities.get(m1, []), stats.densities.get(m2, []), grid, j, jbar)
    return StosszahlDiagnostic(lhs, rhs)


def stosszahlansatz_outcome(lhs_values, rhs_values, tolerance=0.3, small_gaps=None, large_gaps=None):
    diagnostic = StosszahlDiagnostic(float(np.mean(lhs_values)), float(np.mean(rhs_values)))
    details = {"lhs": diagnostic.lhs, "rhs": diagnostic.rhs}
    passed = diagnostic.gap <= tolerance
    if small_gaps is not None and large_gaps is not None and len(small_gaps) and len(large_gaps):
        details["median_gap_small"] = float(np.median(small_gaps))
        details["median_gap_large"] = float(np.median(large_gaps))
        passed = passed and details["median_gap_large"] < details["median_gap_small"]
    return CheckOutcome("stosszahlansatz", passed, diagnostic.gap, tolerance, details)


# ==============================
# Effective rate
# ==============================

@dataclass(frozen=True)
class RateFit:
    rate: float
    low: float
    high: float
    collisions: int
    alpha: float
    beta: float
    window: float

    @property
    def beta_error(self):
        return abs(self.rate - self.beta) / self.beta if self.beta else math.inf

    @property
    def separation(self):
        return self.alpha / self.rate if self.rate > 0 else math.inf

    @property
    def closer_to_beta(self):
        return abs(self.rate - self.beta) < abs(self.rate - self.alpha)


def _slope_through_origin(times, values):
    denom = float(np.dot(times, times))
    return float(np.dot(times, values)) / denom if denom > 0 else 0.0


def fit_decay_rate(times, f1):
    """c in 1/f1(t) - 1/f1(0) = c t, the monodisperse law df1/dt = -c f1^2."""
    times = np.asarray(times, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    if np.any(f1 <= 0):
        raise FitError("mass-1 density vanished inside the fitting window")
    return _slope_through_origin(times - times[0], 1.0 / f1 - 1.0 / f1[0])


def effective_rate_experiment(count_series, scale, alpha, beta, horizon, window=EARLY_WINDOW,
                              bootstrap=200, seed=0):
    """
    Fit the early-time decay of the mass-1 density against c f1^2 and set the
    fitted c against alpha and the cell-problem beta.

    count_series: per replica, (t, mass-1 count) rows on a shared time grid.
    scale: eps^{d-2} / volume, turning counts into densities.
    """
    if not count_series:
        raise InsufficientReplicasError("no replicas to fit")
    limit = window * horizon * (1 + 1e-12)
    times = np.array([t for t, _ in count_series[0] if t <= limit])
    if len(times) < 3:
        raise FitError(f"only {len(times)} samples inside the first {window:.0%} of the horizon")
    counts = np.array([[c for t, c in series if t <= limit] for series in count_series], dtype=float)
    collisions = int(np.sum(counts[:, 0] - counts[:, -1]))
    if collisions < MIN_FIT_COLLISIONS:
        raise FitError(f"{collisions} collisions in the fitting window; at least {MIN_FIT_COLLISIONS} needed")
    rate = fit_decay_rate(times, scale * counts.mean(axis=0))
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(bootstrap):
        pick = rng.integers(0, len(counts), len(counts))
        mean = scale * counts[pick].mean(axis=0)
        if np.all(mean > 0):
            samples.append(fit_decay_rate(times, mean))
    low, high = (np.percentile(samples, [2.5, 97.5]) if samples else (rate, rate))
    fit = RateFit(rate, float(low), float(high), collisions, float(alpha), float(beta), window * horizon)
    logger.info("effective rate %.4g [%.4g, %.4g]; alpha %.4g, beta %.4g", rate, low, high, alpha, beta)
    return fit


def effective_rate_outcome(fit, tolerance=0.25, separation=2.0):
    """
    The fit must land within ``tolerance`` of beta. When alpha and beta are
    themselves ``separation`` apart it must also sit nearer beta and that far
    from alpha.
    """
    passed = fit.beta_error <= tolerance
    if fit.alpha > separation * fit.beta:
        passed = passed and fit.closer_to_beta and fit.separation >= separation
    details = asdict(fit) | {"separation": fit.separation, "beta_error": fit.beta_error}
    return CheckOutcome("effective_rate", passed, fit.beta_error, tolerance, details)


# ==============================
# Propensity and bookkeeping audits
# ==============================

def _summaries(stats_list):
    return [s.summary() if hasattr(s, "summary") else dict(s) for s in stats_list]


@dataclass(frozen=True)
class PropensityReport:
    mean: float
    sem: float
    big_z: float
    replicas: int
    max_collisions: int
    collision_bound_ok: bool

    @property
    def passed(self):
        return self.mean <= self.big_z + 3 * self.sem and self.collision_bound_ok


def _mean_sem(values):
    values = np.asarray(values, dtype=float)
    sem = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return float(values.mean()), sem


def propensity_audit(stats_list, big_z):
    """Replica mean of the rate integral against Z + 3 SEM; collisions never exceed N."""
    rows = _summaries(stats_list)
    if len(rows) < MIN_REPLICAS:
        raise InsufficientReplicasError(f"propensity audit needs {MIN_REPLICAS} replicas, got {len(rows)}")
    mean, sem = _mean_sem([r["rate_integral"] for r in rows])
    bound_ok = all(r["collision_count"] <= r["initial_count"] for r in rows)
    return PropensityReport(
        mean=mean,
        sem=sem,
        big_z=float(big_z),
        replicas=len(rows),
        max_collisions=max(r["collision_count"] for r in rows),
        collision_bound_ok=bound_ok,
    )


def propensity_outcome(report):
    return CheckOutcome(
        "propensity", report.passed, report.mean, report.big_z + 3 * report.sem,
        {"sem": report.sem, "replicas": report.replicas, "max_collisions": report.max_collisions},
    )


def compensator_check(stats_list):
    """eps^{d-2} x collision count and the compensator agree in mean within 3 SEM."""
    rows = _summaries(stats_list)
    if len(rows) < 2:
        raise InsufficientReplicasError("the compensator check needs at least two replicas")
    gaps = [r["scaled_collisions"] - r["compensator"] for r in rows]
    mean, sem = _mean_sem(gaps)
    passed = abs(mean) <= 3 * sem if sem > 0 else abs(mean) <= 1e-12
    return CheckOutcome("compensator", passed, mean, 3 * sem, {"replicas": len(rows)})


def mean_free_path_check(small_rates, large_rates, factor=2.0):
    """Collisions per particle per unit time stay within ``factor`` across N."""
    small = float(np.mean(small_rates))
    large = float(np.mean(large_rates))
    if small <= 0 or large <= 0:
        ratio = 1.0 if small == large else math.inf
    else:
        ratio = max(small, large) / min(small, large)
    return CheckOutcome("mean_free_path", ratio <= factor, ratio, factor, {"small": small, "large": large})


def mass_conservation_audit(events, initial_mass, final_mass):
    """
    Replay collision events: no id is consumed twice, new ids are fresh,
    merged masses add up and the total mass is unchanged.
    """
    known = {}
    consumed = set()
    problems = []
    for event in events:
        row = event.as_dict() if hasattr(event, "as_dict") else event
        id_a, id_b = row["id_a"], row["id_b"]
        m_a, m_b = row["masses"]
        for pid, mass in ((id_a, m_a), (id_b, m_b)):
            if pid in consumed:
                problems.append(f"id {pid} consumed twice")
            if pid in known and known[pid] != mass:
                problems.append(f"id {pid} changed mass")
            consumed.add(pid)
        if row["new_id"] in known or row["new_id"] in consumed:
            problems.append(f"id {row['new_id']} reused")
        known[row["new_id"]] = m_a + m_b
    if initial_mass != final_mass:
        problems.append(f"total mass {initial_mass} -> {final_mass}")
    return CheckOutcome(
        "mass_conservation", not problems, float(final_mass - initial_mass), 0.0,
        {"events": len(events), "problems": problems[:20]},
    )


def macro_conservation_check(relative_drift, tolerance=1e-6):
    return CheckOutcome("macro_conservation", relative_drift <= tolerance, relative_drift, tolerance)


def beta_bounds_check(rows, dd, capacity, tol=1e-6, solver_tol=1e-8):
    """0 <= beta <= alpha, beta <= (d(n)+d(m)) Cap and residual within tolerance."""
    problems = []
    for row in rows:
        bound = (dd(row.n) + dd(row.m)) * capacity
        if not 0 <= row.beta <= row.alpha + tol:
            problems.append(f"beta({row.n},{row.m}) outside [0, alpha]")
        if row.beta > bound + tol:
            problems.append(f"beta({row.n},{row.m}) above the capacity bound")
        if row.residual > solver_tol:
            problems.append(f"residual {row.residual:.2e} at ({row.n},{row.m})")
    worst = max((row.beta / ((dd(row.n) + dd(row.m)) * capacity) for row in rows), default=0.0)
    return CheckOutcome("beta_bounds", not problems, worst, 1.0, {"pairs": len(rows), "problems": problems[:20]})


def capacity_check(curve, capacity, tol=1e-6):
    values = [f for _, f in curve]
    monotone = all(b >= a - 1e-8 * max(1.0, abs(a)) for a, b in zip(values, values[1:]))
    top = max(values, default=0.0)
    return CheckOutcome("capacity", monotone and top <= capacity + tol, top, capacity + tol, {"monotone": monotone})


def micro_macro_check(row, tolerance=0.2):
    return CheckOutcome(
        f"micro_macro_n{row.n}_t{row.t:g}", row.relative_error <= tolerance, row.relative_error, tolerance,
        {"micro": row.micro, "macro": row.macro, "replicas": row.replicas},
    )
