import math

import numpy as np
from django.test import SimpleTestCase

from kinetics.cell import CellSolver, build_grid, compute_beta
from kinetics.core import (
    CoagulationModel,
    DensityComponent,
    DiffusionPolicy,
    InitialDensities,
    RatePolicy,
    build_params,
    make_kernel,
)
from kinetics.exceptions import ConfigMismatchError, FitError, InsufficientReplicasError
from kinetics.macro import BetaMatrix, BetaRow, MacroField, MacroGrid, solve
from kinetics.micro import Configuration, CountObserver, TrajectoryStats, run, sample_initial
from kinetics.rng import make_rng
from kinetics.spatial import Domain
from kinetics.validation import (
    CheckOutcome,
    RateFit,
    StosszahlDiagnostic,
    TestFunctional,
    beta_bounds_check,
    capacity_check,
    comparison_row,
    compensator_check,
    convergence_check,
    effective_rate_experiment,
    effective_rate_outcome,
    fit_decay_rate,
    improvement_count,
    macro_conservation_check,
    macro_functional,
    mass_conservation_audit,
    mean_free_path_check,
    micro_macro_check,
    propensity_audit,
    propensity_outcome,
    require_same_physics,
    stosszahlansatz_check,
    stosszahlansatz_outcome,
    theorem1_functional,
    time_integral,
)


def summary(rate_integral, collisions, initial=100, weight=0.01, compensator=0.0):
    return {
        "rate_integral": rate_integral,
        "compensator": compensator,
        "collision_count": collisions,
        "initial_count": initial,
        "scaled_collisions": weight * collisions,
    }


def decay_series(rate, f0, times, scale):
    """Mass-1 counts that follow 1/f1 = 1/f0 + rate t exactly."""
    return [(t, (1.0 / (1.0 / f0 + rate * t)) / scale) for t in times]


class TestFunctionalTests(SimpleTestCase):
    def test_kinds(self):
        x = np.array([[0.5, 0.5, 0.5], [3.0, 3.0, 3.0]])
        np.testing.assert_allclose(TestFunctional("constant", 2.0)(x), [2.0, 2.0])
        gaussian = TestFunctional("gaussian", 1.0, center=(0.5, 0.5, 0.5), width=0.2)
        self.assertAlmostEqual(float(gaussian(x)[0]), 1.0)
        self.assertLess(float(gaussian(x)[1]), 1e-12)
        box = TestFunctional("box", 1.0, lo=(0.0,) * 3, hi=(1.0,) * 3, sharpness=0.01)
        self.assertAlmostEqual(float(box(x)[0]), 1.0, places=9)
        self.assertAlmostEqual(float(box(x)[1]), 0.0, places=9)

    def test_mass_restriction(self):
        j = TestFunctional("constant", 1.0, mass=2)
        self.assertEqual(float(j(np.zeros((1, 3)), 1)[0]), 0.0)
        self.assertEqual(float(j(np.zeros((1, 3)), 2)[0]), 1.0)

    def test_unbounded_amplitude_is_rejected(self):
        with self.assertRaises(ValueError):
            TestFunctional("constant", math.inf)


class MicroMacroTests(SimpleTestCase):
    def test_macro_functional_homogeneous_and_spatial(self):
        field = MacroField("homogeneous", np.array([2.0, 0.5]), volume=8.0)
        self.assertAlmostEqual(macro_functional(field, TestFunctional("constant", 1.5), 1), 24.0)
        grid = MacroGrid((4, 4, 4), 0.5, "torus")
        spatial = MacroField("spatial", np.full((2, 4, 4, 4), 2.0), grid=grid)
        self.assertAlmostEqual(macro_functional(spatial, TestFunctional("constant", 1.5), 1), 24.0)

    def test_homogeneous_needs_side_for_shaped_functionals(self):
        field = MacroField("homogeneous", np.array([1.0]))
        with self.assertRaises(ValueError):
            macro_functional(field, TestFunctional("gaussian", 1.0, center=(0.5,) * 3), 1)

    def test_functional_against_macro_trajectory(self):
        trajectory = solve(MacroField("homogeneous", np.array([1.0, 0.0])), 0.5, 0.01, BetaMatrix.constant(2, 0.0))
        snapshots = []
        for k in range(4):
            count = 100 + k
            cfg = Configuration(np.full((count, 3), 0.5), np.ones(count, dtype=int), time=0.5, epsilon=0.01,
                                domain=Domain("torus", 1.0))
            snapshots.append(cfg)
        row = theorem1_functional(snapshots, trajectory, TestFunctional("constant", 1.0), 1, 0.5)
        self.assertAlmostEqual(row.micro, 1.015)
        self.assertEqual(row.macro, 1.0)
        self.assertEqual(row.replicas, 4)
        self.assertAlmostEqual(row.relative_error, 0.015)
        self.assertTrue(micro_macro_check(row, 0.02).passed)
        self.assertFalse(micro_macro_check(row, 0.01).passed)

    def test_snapshots_at_the_wrong_time_are_refused(self):
        trajectory = solve(MacroField("homogeneous", np.array([1.0, 0.0])), 0.5, 0.01, BetaMatrix.constant(2, 0.0))
        cfg = Configuration(np.zeros((1, 3)), [1], time=0.25)
        with self.assertRaises(ConfigMismatchError):
            theorem1_functional([cfg], trajectory, TestFunctional(), 1, 0.5)

    def test_mixed_physics_is_refused(self):
        require_same_physics("abc", "abc", "")
        with self.assertRaises(ConfigMismatchError):
            require_same_physics("abc", "abd")

    def test_comparison_needs_replicas(self):
        with self.assertRaises(InsufficientReplicasError):
            comparison_row([], 1.0, 1, 0.5)

    def test_convergence(self):
        pairings = [([0.3, 0.2], [0.1, 0.1])] * 4 + [([0.1], [0.2])]
        self.assertEqual(improvement_count(pairings), 4)
        self.assertTrue(convergence_check(pairings, 0.8).passed)
        self.assertFalse(convergence_check(pairings, 0.9).passed)
        with self.assertRaises(InsufficientReplicasError):
            convergence_check([])


class StosszahlTests(SimpleTestCase):
    def test_time_integral(self):
        self.assertAlmostEqual(time_integral([(0.0, 1.0), (1.0, 3.0), (2.0, 3.0)]), 5.0)
        self.assertEqual(time_integral([(0.0, 1.0)]), 0.0)

    def test_check_from_recorded_overlaps(self):
        stats = TrajectoryStats(initial_count=10, initial_mass=10, epsilon_power=0.1)
        stats.q_series = [(0.0, 2.0), (1.0, 2.0)]
        stats.overlap_series = [(0.0, 1.0), (1.0, 1.0)]
        diagnostic = stosszahlansatz_check(stats, 2.2, 1, 1)
        self.assertAlmostEqual(diagnostic.lhs, 2.0)
        self.assertAlmostEqual(diagnostic.rhs, 2.2)
        self.assertAlmostEqual(diagnostic.gap, 0.1)

    def test_sparse_sampling_is_refused(self):
        stats = TrajectoryStats(initial_count=10, initial_mass=10, epsilon_power=0.1)
        stats.q_series = [(0.0, 1.0), (1.0, 1.0)]
        stats.overlap_series = [(0.0, 1.0), (1.0, 1.0)]
        with self.assertRaises(ValueError):
            stosszahlansatz_check(stats, 1.0, 1, 1, tau=0.01)

    def test_outcome_requires_shrinking_gap(self):
        self.assertTrue(stosszahlansatz_outcome([1.0, 1.0], [1.1, 1.1], 0.3, [0.4], [0.1]).passed)
        self.assertFalse(stosszahlansatz_outcome([1.0, 1.0], [1.1, 1.1], 0.3, [0.1], [0.4]).passed)
        self.assertFalse(stosszahlansatz_outcome([1.0], [2.0], 0.3).passed)

    def test_zero_lhs(self):
        self.assertEqual(StosszahlDiagnostic(0.0, 0.0).gap, 0.0)
        self.assertEqual(StosszahlDiagnostic(0.0, 1.0).gap, math.inf)


class EffectiveRateTests(SimpleTestCase):
    def test_fit_recovers_exact_decay(self):
        times = np.linspace(0.0, 0.1, 11)
        f1 = 1.0 / (1.0 / 5.0 + 3.0 * times)
        self.assertAlmostEqual(fit_decay_rate(times, f1), 3.0, places=10)

    def test_fit_refuses_vanishing_density(self):
        with self.assertRaises(FitError):
            fit_decay_rate([0.0, 1.0], [1.0, 0.0])

    def test_experiment_on_synthetic_counts(self):
        scale = 0.01
        times = np.linspace(0.0, 1.0, 101)
        series = [decay_series(2.0, 10.0, times, scale) for _ in range(5)]
        fit = effective_rate_experiment(series, scale, alpha=10.0, beta=2.0, horizon=1.0, bootstrap=20)
        self.assertAlmostEqual(fit.rate, 2.0, places=6)
        self.assertGreaterEqual(fit.collisions, 100)
        self.assertAlmostEqual(fit.low, fit.rate, places=6)
        outcome = effective_rate_outcome(fit, 0.25, 2.0)
        self.assertTrue(outcome.passed)
        self.assertAlmostEqual(outcome.details["separation"], 5.0, places=5)

    def test_too_few_collisions(self):
        times = np.linspace(0.0, 1.0, 101)
        series = [[(t, 1000.0) for t in times]]
        with self.assertRaises(FitError):
            effective_rate_experiment(series, 0.01, 1.0, 1.0, 1.0)

    def test_outcome_near_alpha_fails_when_rates_separate(self):
        fit = RateFit(rate=9.0, low=8.0, high=10.0, collisions=500, alpha=10.0, beta=2.0, window=0.1)
        self.assertFalse(effective_rate_outcome(fit).passed)

    def test_outcome_without_separation_only_needs_beta(self):
        fit = RateFit(rate=1.05, low=1.0, high=1.1, collisions=500, alpha=1.1, beta=1.0, window=0.1)
        self.assertTrue(effective_rate_outcome(fit).passed)

    def test_simulated_monomers_decay_at_the_cell_rate(self):
        kernel = make_kernel(3, "bump")
        alpha, dd = RatePolicy("constant", 1.0), DiffusionPolicy("constant", 0.5)
        model = CoagulationModel(kernel, alpha, dd, 20)
        horizon = 0.0135
        params = build_params(3, 20.0, 400, tau_factor=0.05, horizon=horizon, seed=17)
        densities = InitialDensities((DensityComponent(1, "uniform", 20.0, lo=(0.0,) * 3, hi=(1.0,) * 3),))
        torus = Domain("torus", 1.0)
        series = []
        for replica in range(10):
            rng = make_rng(params.seed, replica)
            cfg = sample_initial(densities, params, rng, torus)
            stats = run(cfg, params, model, rng, [CountObserver(20, every=1)])
            series.append([(t, counts[0]) for t, counts in stats.counts])
        beta = compute_beta(1, 1, kernel, alpha, dd, solver=CellSolver(build_grid(kernel, "radial", n_shells=200)))
        fit = effective_rate_experiment(series, params.epsilon_power, 1.0, beta, horizon, window=1.0, bootstrap=50)
        self.assertGreaterEqual(fit.collisions, 300)
        self.assertLessEqual(fit.beta_error, 0.25, f"fitted {fit.rate:.4f} against beta {beta:.4f}")
        self.assertLess(fit.high - fit.low, 0.5 * beta)
        self.assertTrue(effective_rate_outcome(fit).passed)


class AuditTests(SimpleTestCase):
    def test_propensity_audit(self):
        rows = [summary(z, 10) for z in (3.9, 4.1, 4.0, 3.8, 4.2)]
        report = propensity_audit(rows, 4.0)
        self.assertTrue(report.passed)
        self.assertAlmostEqual(report.mean, 4.0)
        self.assertEqual(propensity_outcome(report).name, "propensity")
        self.assertFalse(propensity_audit([summary(9.0, 10) for _ in range(5)], 4.0).passed)

    def test_propensity_needs_replicas(self):
        with self.assertRaises(InsufficientReplicasError):
            propensity_audit([summary(1.0, 1)], 4.0)

    def test_collision_bound(self):
        rows = [summary(1.0, 10) for _ in range(4)] + [summary(1.0, 101)]
        self.assertFalse(propensity_audit(rows, 4.0).collision_bound_ok)

    def test_compensator(self):
        rows = [summary(5.0, 10, compensator=0.1 + d) for d in (0.01, -0.01, 0.02, -0.02)]
        self.assertTrue(compensator_check(rows).passed)
        biased = [summary(0.1, 10, compensator=1.0 + d) for d in (0.01, -0.01, 0.02, -0.02)]
        self.assertFalse(compensator_check(biased).passed)

    def test_mean_free_path(self):
        self.assertTrue(mean_free_path_check([10.0, 12.0], [11.0, 13.0]).passed)
        outcome = mean_free_path_check([10.0], [30.0])
        self.assertFalse(outcome.passed)
        self.assertAlmostEqual(outcome.value, 3.0)
        self.assertTrue(mean_free_path_check([0.0], [0.0]).passed)

    def test_mass_conservation_audit(self):
        events = [
            {"id_a": 0, "id_b": 1, "masses": [1, 1], "new_id": 4},
            {"id_a": 4, "id_b": 2, "masses": [2, 1], "new_id": 5},
        ]
        self.assertTrue(mass_conservation_audit(events, 4, 4).passed)
        reused = events + [{"id_a": 0, "id_b": 3, "masses": [1, 1], "new_id": 6}]
        outcome = mass_conservation_audit(reused, 4, 4)
        self.assertFalse(outcome.passed)
        self.assertIn("id 0 consumed twice", outcome.details["problems"])
        self.assertFalse(mass_conservation_audit(events, 4, 3).passed)

    def test_macro_conservation(self):
        self.assertTrue(macro_conservation_check(1e-9).passed)
        self.assertFalse(macro_conservation_check(1e-3).passed)

    def test_beta_bounds(self):
        dd = DiffusionPolicy("constant", 0.5)
        cap = 4.0 * math.pi
        good = [BetaRow(1, 1, 10.0, 10.0, 6.0, 1e-12)]
        self.assertTrue(beta_bounds_check(good, dd, cap).passed)
        above_alpha = [BetaRow(1, 1, 1.0, 1.0, 2.0, 1e-12)]
        self.assertFalse(beta_bounds_check(above_alpha, dd, cap).passed)
        above_capacity = [BetaRow(1, 1, 100.0, 100.0, 13.0, 1e-12)]
        self.assertFalse(beta_bounds_check(above_capacity, dd, cap).passed)
        loose = [BetaRow(1, 1, 10.0, 10.0, 6.0, 1e-3)]
        self.assertFalse(beta_bounds_check(loose, dd, cap).passed)

    def test_capacity_check(self):
        cap = 4.0 * math.pi
        self.assertTrue(capacity_check([(1.0, 0.9), (10.0, 6.0), (1e4, 12.3)], cap).passed)
        self.assertFalse(capacity_check([(1.0, 0.9), (10.0, 0.5)], cap).passed)
        self.assertFalse(capacity_check([(1.0, 0.9), (1e6, 13.0)], cap).passed)

    def test_outcome_verdicts(self):
        outcome = CheckOutcome("demo", False, 1.0, 0.5)
        self.assertEqual(outcome.verdict, "FAIL")
        self.assertEqual(outcome.as_dict()["verdict"], "FAIL")
