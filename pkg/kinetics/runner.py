"""
Experiment pipelines.

``run_experiment`` drives one pipeline (cell_problem, capacity_curve,
simulate, pde, validate or full) for a validated RunConfig, writes every
artifact under the run's output directory and records the run in the
ledger. Replicas are dispatched as Celery tasks.
"""
import logging
import math
from pathlib import Path

import numpy as np
from django.db import DatabaseError
from django.utils import timezone

from . import artifacts
from .artifacts import Provenance
from .cell import CellSolver, build_grid, capacity_reference, effective_rate_curve
from .config import RunConfig
from .core import check_hypothesis
from .exceptions import CoagLabError, ConfigMismatchError, FitError, HypothesisError, InsufficientReplicasError
from .macro import (
    BetaRow,
    MacroGrid,
    beta_matrix_from_rows,
    beta_table,
    homogeneous_field,
    solve,
    spatial_field,
)
from .micro import (
    Configuration,
    CountObserver,
    DensityGrid,
    DensityObserver,
    FunctionalObserver,
    PropensityObserver,
    SnapshotObserver,
    run,
    sample_initial,
)
from .rng import make_rng
from .validation import (
    CheckOutcome,
    beta_bounds_check,
    capacity_check,
    compensator_check,
    convergence_check,
    effective_rate_experiment,
    effective_rate_outcome,
    macro_conservation_check,
    macro_functional,
    mass_conservation_audit,
    mean_free_path_check,
    micro_macro_check,
    propensity_audit,
    propensity_outcome,
    stosszahlansatz_outcome,
    theorem1_functional,
    time_integral,
)

logger = logging.getLogger(__name__)

STAGES = {
    "cell_problem": ("cell_problem",),
    "capacity_curve": ("capacity_curve",),
    "simulate": ("simulate",),
    "pde": ("pde",),
    "validate": ("validate",),
    "full": ("cell_problem", "capacity_curve", "simulate", "pde", "validate"),
}
SMALL = "_small"


# ==============================
# One replica
# ==============================

def _functional_masses(cfg):
    functional = cfg.test_functional()
    if functional.mass is not None:
        return (functional.mass,)
    return tuple(cfg.densities().masses())


def simulate_one(cfg: RunConfig, n_particles, replica):
    """
    Run replica ``replica`` of the ensemble with ``n_particles`` particles
    and return a JSON-ready record of everything the validators consume.
    """
    params = cfg.params(n_particles)
    model = cfg.model()
    domain = cfg.domain()
    sim = cfg["simulate"]
    rng = make_rng(params.seed, replica)
    initial = sample_initial(cfg.densities(), params, rng, domain)
    m1, m2 = sim["q_masses"]
    compare_times = tuple(cfg["validate"]["compare_times"])
    snapshot_times = tuple(sim["snapshot_times"])
    functional_times = sorted(set(compare_times) | set(snapshot_times))
    needs_overlap = "stosszahlansatz" in cfg["validate"]["checks"] and domain.periodic
    observers = [
        CountObserver(model.m_max, every=sim["sample_every"]),
        PropensityObserver(model, m1, m2, every=sim["sample_every"],
                           delta=cfg.delta(params) if needs_overlap else None),
        FunctionalObserver(cfg.test_functional(), _functional_masses(cfg), functional_times),
        SnapshotObserver(functional_times, keep_at=compare_times),
    ]
    if sim["write_densities"] and replica == 0:
        grid = DensityGrid.for_domain(domain, params.dim, sim["density_points"])
        observers.append(DensityObserver(cfg.densities().masses(), cfg.delta(params), grid, snapshot_times))
    stats = run(initial, params, model, rng, observers, sim["overflow_fraction"], functional_times)
    record = {
        "replica": replica,
        "n_particles": params.n_particles,
        "epsilon": params.epsilon,
        "summary": stats.summary(),
        "events": [event.as_dict() for event in stats.events],
        "counts": [[t, *counts] for t, counts in stats.counts],
        "functionals": [[t, n, value] for t, n, value in stats.functionals],
        "snapshots": [_snapshot_record(s) for s in stats.snapshots],
        "q_integral": time_integral(stats.q_series),
        "overlap_integral": time_integral(stats.overlap_series) if stats.overlap_series else None,
    }
    if stats.densities:
        record["densities"] = [
            {"n": n, "index": _time_index(snapshot_times, t), "t": t, "values": values.tolist()}
            for n, series in stats.densities.items() for t, values in series
        ]
    return record


def _snapshot_record(snapshot):
    row = {"t": snapshot.t, "digest": snapshot.digest}
    if snapshot.configuration is not None:
        row |= snapshot.configuration.as_record()
    return row


def _time_index(times, t):
    return next(k for k, s in enumerate(times) if math.isclose(s, t, rel_tol=1e-12, abs_tol=1e-12))


def schedule_replicas(cfg, n_particles, replicas, workers):
    """Dispatch replicas in chunks of at most ``workers`` tasks; results in replica order."""
    from celery import group

    from .tasks import simulate_replica

    payload = {"config": cfg.canonical(), "n_particles": n_particles}
    results = []
    for start in range(0, replicas, workers):
        chunk = range(start, min(start + workers, replicas))
        job = group(simulate_replica.s(payload, k) for k in chunk).apply_async()
        results.extend(job.get(disable_sync_subtasks=False))
        logger.info("replicas %d-%d of %d done (N=%d)", chunk.start, chunk.stop - 1, replicas, n_particles)
    return results


# ==============================
# Run context
# ==============================

class RunContext:
    """State shared by the stages of one run."""

    def __init__(self, cfg: RunConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.provenance = Provenance.of(cfg)
        self.outcomes = []
        self.skipped = []
        self._solver = None
        self._rows = None
        self._trajectory = None

    def path(self, name):
        return self.out / name

    @property
    def solver(self):
        if self._solver is None:
            cell = self.cfg["cell"]
            grid = build_grid(self.cfg.kernel(), cell["mode"], cell["shells"], cell["cells_per_axis"])
            self._solver = CellSolver(grid, cell["tol"])
        return self._solver

    def beta_rows(self):
        """The beta table, read back when this config already wrote it."""
        if self._rows is None:
            path = self.path("beta_table.csv")
            if path.exists():
                table = artifacts.read_csv(path)
                if table.provenance.config_hash == self.cfg.config_hash:
                    self._rows = [
                        BetaRow(r["n"], r["m"], r["alpha"], r["alpha_prime"], r["beta"], r["residual"])
                        for r in table.records()
                    ]
            if self._rows is None:
                model = self.cfg.model()
                self._rows = beta_table(model.m_max, model.kernel, model.alpha, model.diffusion,
                                        tol=self.cfg["cell"]["tol"], solver=self.solver)
        return self._rows

    def macro_trajectory(self):
        """The macro solution on every snapshot and comparison time, solved once per run."""
        if self._trajectory is None:
            cfg = self.cfg
            pde = cfg["pde"]
            model = cfg.model()
            beta = beta_matrix_from_rows(self.beta_rows(), model.m_max).scaled(pde["beta_scale"])
            if pde["mode"] == "spatial":
                points = pde["grid_points"]
                grid = MacroGrid((points,) * cfg["params"]["dim"], cfg["initial"]["side"] / points, pde["boundary"])
                f0 = spatial_field(cfg.densities(), model.m_max, grid)
            else:
                f0 = homogeneous_field(cfg.densities(), model.m_max, cfg.volume)
            times = sorted(set(pde["snapshot_times"]) | set(cfg["validate"]["compare_times"])
                           | set(cfg["simulate"]["snapshot_times"]))
            self._trajectory = solve(f0, cfg["params"]["horizon"], pde["dt"], beta, model.diffusion, times)
        return self._trajectory

    def record(self, outcome: CheckOutcome):
        self.outcomes.append(outcome)
        logger.info("%s %s (value %s, threshold %s)", outcome.verdict, outcome.name, outcome.value, outcome.threshold)

    def skip(self, name, reason):
        self.skipped.append({"name": name, "reason": reason})
        logger.warning("skipped %s: %s", name, reason)


# ==============================
# Stages
# ==============================

def stage_cell_problem(ctx):
    rows = ctx.beta_rows()
    artifacts.write_csv(
        ctx.path("beta_table.csv"), ctx.provenance,
        ("n", "m", "alpha", "alpha_prime", "beta", "residual"),
        ((r.n, r.m, r.alpha, r.alpha_prime, r.beta, r.residual) for r in rows),
    )
    cell = ctx.cfg["cell"]
    curve = effective_rate_curve(ctx.cfg.kernel(), cell["dd_sum"], cell["alphas"],
                                 tol=cell["tol"], solver=ctx.solver)
    artifacts.write_csv(ctx.path("f_curve.csv"), ctx.provenance, ("beta_param", "F"), curve)


def stage_capacity_curve(ctx):
    cell = ctx.cfg["cell"]
    kernel = ctx.cfg.kernel()
    capacity = capacity_reference(kernel).value
    grid = np.logspace(-3, 6, 19)
    curve = effective_rate_curve(kernel, 1.0, grid, tol=cell["tol"], solver=ctx.solver)
    artifacts.write_csv(
        ctx.path("capacity.csv"), ctx.provenance, ("beta_param", "F", "capacity", "gap"),
        ((b, f, capacity, (capacity - f) / capacity) for b, f in curve),
    )


def _write_ensemble(ctx, records, suffix):
    m_max = ctx.cfg["params"]["m_max"]
    if not suffix:
        artifacts.write_jsonl(
            ctx.path("events.jsonl"), ctx.provenance,
            (event | {"replica": r["replica"]} for r in records for event in r["events"]),
        )
    count_columns = ["replica", "t"] + [f"n{k}" for k in range(1, m_max + 1)] + ["overflow"]
    artifacts.write_jsonl(
        ctx.path(f"snapshots{suffix}.jsonl"), ctx.provenance,
        (row | {"replica": r["replica"]} for r in records for row in r["snapshots"]),
    )
    artifacts.write_csv(
        ctx.path(f"counts{suffix}.csv"), ctx.provenance, count_columns,
        ([r["replica"], *row] for r in records for row in r["counts"]),
    )
    artifacts.write_csv(
        ctx.path(f"functionals{suffix}.csv"), ctx.provenance, ("replica", "t", "n", "value"),
        ([r["replica"], *row] for r in records for row in r["functionals"]),
    )
    artifacts.write_csv(
        ctx.path(f"stosszahl{suffix}.csv"), ctx.provenance, ("replica", "q_integral", "overlap_integral"),
        ((r["replica"], r["q_integral"], r["overlap_integral"]) for r in records),
    )
    first = records[0] if records else {}
    artifacts.write_json(ctx.path(f"stats{suffix}.json"), ctx.provenance, {
        "n_particles": first.get("n_particles"),
        "epsilon": first.get("epsilon"),
        "replicas": [r["summary"] | {"replica": r["replica"]} for r in records],
    })
    for r in records:
        for row in r.get("densities", ()):
            grid = DensityGrid.for_domain(ctx.cfg.domain(), ctx.cfg["params"]["dim"],
                                          ctx.cfg["simulate"]["density_points"])
            artifacts.write_grid_csv(
                ctx.path(f"density_n{row['n']}_t{row['index']}{suffix}.csv"),
                ctx.provenance, grid.axes, np.asarray(row["values"]),
            )


def stage_simulate(ctx):
    cfg = ctx.cfg
    sim = cfg["simulate"]
    workers = cfg["run"]["workers"]
    records = schedule_replicas(cfg, cfg["params"]["n_particles"], sim["replicas"], workers)
    _write_ensemble(ctx, records, "")
    if sim["n_particles_small"] and sim["replicas"]:
        small = schedule_replicas(cfg, sim["n_particles_small"], sim["replicas"], workers)
        _write_ensemble(ctx, small, SMALL)


def stage_pde(ctx):
    cfg = ctx.cfg
    pde = cfg["pde"]
    model = cfg.model()
    side = cfg["initial"]["side"]
    trajectory = ctx.macro_trajectory()
    artifacts.write_csv(
        ctx.path("macro_counts.csv"), ctx.provenance,
        ["t"] + [f"n{k}" for k in range(1, model.m_max + 1)],
        ([t, *totals] for t, totals in trajectory.count_rows()),
    )
    functional = cfg.test_functional()
    masses = _functional_masses(cfg)
    artifacts.write_csv(
        ctx.path("macro_functionals.csv"), ctx.provenance, ("t", "n", "value"),
        ((t, n, macro_functional(field, functional, n, side)) for t, field in zip(trajectory.times, trajectory.fields)
         for n in masses),
    )
    if pde["mode"] == "spatial":
        for index, (t, field) in enumerate(zip(trajectory.times, trajectory.fields)):
            for n in cfg.densities().masses():
                artifacts.write_grid_csv(ctx.path(f"macro_n{n}_t{index}.csv"), ctx.provenance,
                                         field.grid.axes, field.f[n - 1])
    ledger = trajectory.ledger
    artifacts.write_json(ctx.path("ledger.json"), ctx.provenance, ledger.as_dict() | {
        "mode": pde["mode"], "dt": pde["dt"], "beta_scale": pde["beta_scale"],
        "max_relative_drift": max(f.ledger.relative_drift for f in trajectory.fields),
    })


# ==============================
# Validation stage
# ==============================

class _Artifacts:
    """Lazy, provenance-checked access to the run directory."""

    def __init__(self, ctx):
        self.ctx = ctx
        self._cache = {}

    def _check(self, provenance):
        artifacts.require_physics(self.ctx.cfg.physics_hash, provenance)
        return provenance

    def has(self, name):
        return self.ctx.path(name).exists()

    def table(self, name):
        if name not in self._cache:
            table = artifacts.read_csv(self.ctx.path(name))
            self._check(table.provenance)
            self._cache[name] = table
        return self._cache[name]

    def json(self, name):
        if name not in self._cache:
            provenance, body = artifacts.read_json(self.ctx.path(name))
            self._check(provenance)
            self._cache[name] = body
        return self._cache[name]

    def jsonl(self, name):
        if name not in self._cache:
            provenance, records = artifacts.read_jsonl(self.ctx.path(name))
            self._cache[name] = (self._check(provenance), records)
        return self._cache[name]

    def events(self):
        return self.jsonl("events.jsonl")[1]


def _needs(ctx, store, name, *files):
    missing = [f for f in files if not store.has(f)]
    if missing:
        ctx.skip(name, f"missing {', '.join(missing)}")
        return False
    return True


def _by_replica(records):
    grouped = {}
    for row in records:
        grouped.setdefault(row["replica"], []).append(row)
    return grouped


def _macro_lookup(table):
    return {(row["t"], row["n"]): row["value"] for row in table.records()}


def _match(lookup, t, n):
    for (time, mass), value in lookup.items():
        if mass == n and math.isclose(time, t, rel_tol=1e-12, abs_tol=1e-12):
            return value
    raise ConfigMismatchError(f"no macro value for n={n} at t={t!r}")


def _beta_of(store, n, m):
    for row in store.table("beta_table.csv").records():
        if (row["n"], row["m"]) in ((n, m), (m, n)):
            return row["beta"], row["alpha"]
    raise ConfigMismatchError(f"beta_table.csv has no entry for ({n}, {m})")


def _checks_propensity(ctx, store):
    stats = store.json("stats.json")["replicas"]
    big_z = ctx.cfg["params"]["big_z"]
    if "propensity" in ctx.cfg["validate"]["checks"]:
        try:
            ctx.record(propensity_outcome(propensity_audit(stats, big_z)))
        except InsufficientReplicasError as exc:
            ctx.skip("propensity", str(exc))
    if "compensator" in ctx.cfg["validate"]["checks"]:
        try:
            ctx.record(compensator_check(stats))
        except InsufficientReplicasError as exc:
            ctx.skip("compensator", str(exc))


def _check_mass(ctx, store):
    stats = store.json("stats.json")["replicas"]
    events = _by_replica(store.events())
    problems = []
    total_events = 0
    for row in stats:
        outcome = mass_conservation_audit(events.get(row["replica"], []), row["initial_mass"], row["final_mass"])
        total_events += outcome.details["events"]
        problems.extend(f"replica {row['replica']}: {p}" for p in outcome.details["problems"])
    ctx.record(CheckOutcome("mass_conservation", not problems, float(len(problems)), 0.0,
                            {"events": total_events, "problems": problems[:20]}))


def _check_beta(ctx, store):
    table = store.table("beta_table.csv")
    rows = [BetaRow(r["n"], r["m"], r["alpha"], r["alpha_prime"], r["beta"], r["residual"]) for r in table.records()]
    capacity = capacity_reference(ctx.cfg.kernel()).value
    ctx.record(beta_bounds_check(rows, ctx.cfg.diffusion(), capacity, solver_tol=ctx.cfg["cell"]["tol"]))


def _check_capacity(ctx, store):
    table = store.table("f_curve.csv")
    curve = list(zip(table.column("beta_param"), table.column("F")))
    ctx.record(capacity_check(curve, capacity_reference(ctx.cfg.kernel()).value))


def _kept_configurations(ctx, rows, t):
    """Configurations recorded at time t, one per replica in replica order."""
    params = ctx.cfg.params()
    domain = ctx.cfg.domain()
    kept = []
    for row in sorted(rows, key=lambda r: r["replica"]):
        if "positions" not in row or not math.isclose(row["t"], t, rel_tol=1e-12, abs_tol=1e-12):
            continue
        cfg = Configuration.from_record(row, params.dim, params.epsilon, domain)
        if cfg.digest() != row["digest"]:
            raise ConfigMismatchError(f"snapshot of replica {row['replica']} at t={t!r} does not match its digest")
        kept.append(cfg)
    return kept


def _check_micro_macro(ctx, store):
    cfg = ctx.cfg
    provenance, rows = store.jsonl("snapshots.jsonl")
    trajectory = ctx.macro_trajectory()
    functional = cfg.test_functional()
    tolerance = cfg["validate"]["micro_macro_tol"]
    hashes = (provenance.physics_hash, store.table("macro_functionals.csv").provenance.physics_hash)
    for t in cfg["validate"]["compare_times"]:
        snapshots = _kept_configurations(ctx, rows, t)
        for n in _functional_masses(cfg):
            if not snapshots:
                ctx.skip(f"micro_macro_n{n}_t{t:g}", "no configurations recorded at this time")
                continue
            row = theorem1_functional(snapshots, trajectory, functional, n, t, hashes, cfg["initial"]["side"])
            ctx.record(micro_macro_check(row, tolerance))


def _paired_errors(ctx, store, suffix):
    micro = store.table(f"functionals{suffix}.csv").records()
    macro = _macro_lookup(store.table("macro_functionals.csv"))
    compare = ctx.cfg["validate"]["compare_times"]
    errors = {}
    for row in micro:
        if any(math.isclose(row["t"], t, rel_tol=1e-12, abs_tol=1e-12) for t in compare):
            errors.setdefault(row["replica"], []).append(abs(row["value"] - _match(macro, row["t"], row["n"])))
    return errors


def _check_convergence(ctx, store):
    small = _paired_errors(ctx, store, SMALL)
    large = _paired_errors(ctx, store, "")
    pairings = [(small[k], large[k]) for k in sorted(set(small) & set(large))]
    try:
        ctx.record(convergence_check(pairings, ctx.cfg["validate"]["improvement"]))
    except InsufficientReplicasError as exc:
        ctx.skip("convergence", str(exc))


def _gaps(table, beta):
    lhs, rhs, gaps = [], [], []
    for row in table.records():
        if row["overlap_integral"] is None:
            continue
        q, overlap = row["q_integral"], beta * row["overlap_integral"]
        lhs.append(q)
        rhs.append(overlap)
        gaps.append(abs(q - overlap) / abs(q) if q else (0.0 if overlap == 0 else math.inf))
    return lhs, rhs, gaps


def _check_stosszahl(ctx, store):
    m1, m2 = ctx.cfg["simulate"]["q_masses"]
    beta, _ = _beta_of(store, m1, m2)
    lhs, rhs, large_gaps = _gaps(store.table("stosszahl.csv"), beta)
    if not lhs:
        ctx.skip("stosszahlansatz", "no pair overlaps were recorded")
        return
    small_gaps = None
    if store.has("stosszahl_small.csv"):
        small_gaps = _gaps(store.table("stosszahl_small.csv"), beta)[2]
    ctx.record(stosszahlansatz_outcome(lhs, rhs, ctx.cfg["validate"]["stosszahl_tol"], small_gaps, large_gaps))


def _check_effective_rate(ctx, store):
    cfg = ctx.cfg
    table = store.table("counts.csv")
    series = {}
    for row in table.records():
        series.setdefault(row["replica"], []).append((row["t"], row["n1"]))
    if not series:
        ctx.skip("effective_rate", "no replicas were simulated")
        return
    beta, alpha = _beta_of(store, 1, 1)
    params = cfg.params()
    val = cfg["validate"]
    try:
        fit = effective_rate_experiment(
            [series[k] for k in sorted(series)], params.epsilon_power / cfg.volume, alpha, beta,
            params.horizon, bootstrap=val["bootstrap"], seed=params.seed,
        )
    except (FitError, InsufficientReplicasError) as exc:
        ctx.record(CheckOutcome("effective_rate", False, None, val["rate_tol"], {"error": str(exc)}))
        return
    ctx.record(effective_rate_outcome(fit, val["rate_tol"], val["separation"]))


def _check_mean_free_path(ctx, store):
    small = [r["collisions_per_particle"] for r in store.json("stats_small.json")["replicas"]]
    large = [r["collisions_per_particle"] for r in store.json("stats.json")["replicas"]]
    ctx.record(mean_free_path_check(small, large, ctx.cfg["validate"]["mfp_factor"]))


def stage_validate(ctx):
    store = _Artifacts(ctx)
    checks = ctx.cfg["validate"]["checks"]
    if ("propensity" in checks or "compensator" in checks) and _needs(ctx, store, "propensity", "stats.json"):
        _checks_propensity(ctx, store)
    if "mass_conservation" in checks and _needs(ctx, store, "mass_conservation", "stats.json", "events.jsonl"):
        _check_mass(ctx, store)
    if "macro_conservation" in checks and _needs(ctx, store, "macro_conservation", "ledger.json"):
        ledger = store.json("ledger.json")
        ctx.record(macro_conservation_check(ledger["max_relative_drift"]))
    if "beta_bounds" in checks and _needs(ctx, store, "beta_bounds", "beta_table.csv"):
        _check_beta(ctx, store)
    if "capacity" in checks and _needs(ctx, store, "capacity", "f_curve.csv"):
        _check_capacity(ctx, store)
    if "micro_macro" in checks and _needs(ctx, store, "micro_macro", "snapshots.jsonl", "macro_functionals.csv"):
        _check_micro_macro(ctx, store)
    if "convergence" in checks and _needs(ctx, store, "convergence", "functionals.csv",
                                          "functionals_small.csv", "macro_functionals.csv"):
        _check_convergence(ctx, store)
    if "stosszahlansatz" in checks and _needs(ctx, store, "stosszahlansatz", "stosszahl.csv", "beta_table.csv"):
        _check_stosszahl(ctx, store)
    if "effective_rate" in checks and _needs(ctx, store, "effective_rate", "counts.csv", "beta_table.csv"):
        _check_effective_rate(ctx, store)
    if "mean_free_path" in checks and _needs(ctx, store, "mean_free_path", "stats.json", "stats_small.json"):
        _check_mean_free_path(ctx, store)
    passed = all(o.passed for o in ctx.outcomes)
    artifacts.write_json(ctx.path("report.json"), ctx.provenance, {
        "passed": passed,
        "checks": [o.as_dict() for o in ctx.outcomes],
        "skipped": ctx.skipped,
    })


STAGE_FUNCTIONS = {
    "cell_problem": stage_cell_problem,
    "capacity_curve": stage_capacity_curve,
    "simulate": stage_simulate,
    "pde": stage_pde,
    "validate": stage_validate,
}


# ==============================
# Ledger and entry point
# ==============================

def _start_record(cfg, pipeline, record):
    from .models import ExperimentRun

    try:
        if record is None:
            record = ExperimentRun(pipeline=pipeline)
        record.pipeline = pipeline
        record.seed = cfg["params"]["seed"]
        record.config_hash = cfg.config_hash
        record.physics_hash = cfg.physics_hash
        record.out_dir = cfg["run"]["out"]
        record.workers = cfg["run"]["workers"]
        record.replicas = cfg["simulate"]["replicas"]
        record.status = ExperimentRun.Status.RUNNING
        record.started_at = timezone.now()
        record.save()
        return record
    except DatabaseError as exc:
        logger.warning("run ledger unavailable: %s", exc)
        return None


def _finish_record(record, status, message="", outcomes=()):
    if record is None:
        return
    from .models import CheckResult

    try:
        record.status = status
        record.message = message[:2000]
        record.finished_at = timezone.now()
        record.save()
        CheckResult.objects.bulk_create([
            CheckResult(run=record, name=o.name, passed=o.passed, value=_finite(o.value),
                        threshold=_finite(o.threshold), details=_plain(o.details))
            for o in outcomes
        ])
    except DatabaseError as exc:
        logger.warning("run ledger unavailable: %s", exc)


def _finite(value):
    return value if value is not None and math.isfinite(value) else None


def _plain(value):
    """JSON-field friendly copy: numpy scalars unwrapped, non-finite floats as None."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _hypothesis_gate(cfg):
    report = check_hypothesis(cfg.alpha(), cfg.diffusion(), cfg["params"]["m_max"], cfg["params"]["dim"])
    if report.holds:
        return report
    if cfg["validate"]["require_hypothesis"]:
        raise HypothesisError(report)
    logger.warning("hypothesis fails at %s (ratio %.6g); the limit theorem does not cover this run",
                   report.worst_triple, report.worst_ratio)
    return report


def run_experiment(cfg: RunConfig, pipeline=None, record=None):
    """
    Execute one pipeline. Returns 0 when every validation check passed (or
    none ran), 1 when any check failed. Output directories of runs that did
    not finish keep their ``_incomplete`` marker.
    """
    from .models import ExperimentRun

    pipeline = pipeline or cfg["run"]["pipeline"]
    if pipeline not in STAGES:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    ctx = RunContext(cfg, cfg["run"]["out"])
    artifacts.mark_incomplete(ctx.out)
    record = _start_record(cfg, pipeline, record)
    logger.info("%s: config %s, seed %d, out %s", pipeline, cfg.config_hash[:12], cfg["params"]["seed"], ctx.out)
    try:
        _hypothesis_gate(cfg)
        for stage in STAGES[pipeline]:
            logger.info("stage %s", stage)
            STAGE_FUNCTIONS[stage](ctx)
    except (CoagLabError, ValueError, OSError) as exc:
        _finish_record(record, ExperimentRun.Status.ERROR, str(exc), ctx.outcomes)
        raise
    artifacts.clear_incomplete(ctx.out)
    failed = [o.name for o in ctx.outcomes if not o.passed]
    status = ExperimentRun.Status.FAILED if failed else ExperimentRun.Status.PASSED
    _finish_record(record, status, ", ".join(failed), ctx.outcomes)
    if failed:
        logger.error("%d checks failed: %s", len(failed), ", ".join(failed))
    return 1 if failed else 0
