import math

import numpy as np
from django.test import SimpleTestCase
from scipy.integrate import solve_ivp

from kinetics.cell import CellSolver, build_grid
from kinetics.core import DensityComponent, DiffusionPolicy, InitialDensities, RatePolicy, make_kernel
from kinetics.exceptions import ConservationError
from kinetics.macro import (
    BetaMatrix,
    MacroField,
    MacroGrid,
    MassLedger,
    beta_matrix,
    beta_table,
    gain,
    homogeneous_field,
    loss,
    reaction_rates,
    solve,
    spatial_field,
    step_homogeneous,
)


def monomers(m_max, value=1.0):
    f = np.zeros(m_max)
    f[0] = value
    return MacroField("homogeneous", f)


def exact_constant_kernel(t, c, m_max):
    """f_n = N^2 (1 - N)^{n-1} with N = 1 / (1 + c t), for unit monomer data."""
    total = 1.0 / (1.0 + c * t)
    n = np.arange(1, m_max + 1)
    return total ** 2 * (1.0 - total) ** (n - 1)


class BetaMatrixTests(SimpleTestCase):
    def test_asymmetric_matrix_is_rejected(self):
        with self.assertRaises(ValueError):
            BetaMatrix(np.array([[1.0, 2.0], [3.0, 1.0]]))

    def test_negative_entries_are_rejected(self):
        with self.assertRaises(ValueError):
            BetaMatrix(np.array([[-1.0]]))

    def test_table_from_cell_problem(self):
        kernel = make_kernel(3, "bump")
        solver = CellSolver(build_grid(kernel, "radial", n_shells=100))
        dd = DiffusionPolicy("power", 1.0, -1.0 / 3.0)
        rows = beta_table(4, kernel, RatePolicy("constant", 10.0), dd, solver=solver)
        self.assertEqual(len(rows), 10)
        self.assertEqual([(r.n, r.m) for r in rows[:4]], [(1, 1), (1, 2), (1, 3), (1, 4)])
        matrix = beta_matrix(4, kernel, RatePolicy("constant", 10.0), dd, solver=solver)
        np.testing.assert_array_equal(matrix.values, matrix.values.T)
        self.assertTrue(matrix.within_capacity(dd, 4.0 * math.pi))
        self.assertEqual(matrix(1, 3), next(r.beta for r in rows if (r.n, r.m) == (1, 3)))


class ReactionTermTests(SimpleTestCase):
    def test_gain_and_loss(self):
        beta = BetaMatrix.constant(3, 2.0)
        f = np.array([1.0, 0.5, 0.25])
        self.assertEqual(gain(f, 1, beta), 0.0)
        self.assertAlmostEqual(gain(f, 2, beta), 2.0)
        self.assertAlmostEqual(gain(f, 3, beta), 2.0 * (1.0 * 0.5 + 0.5 * 1.0))
        self.assertAlmostEqual(loss(f, 1, beta), 2.0 * 1.0 * 2.0 * 1.75)

    def test_vectorized_terms_match_scalar_ones(self):
        beta = BetaMatrix(np.array([[1.0, 0.5, 0.2], [0.5, 0.3, 0.1], [0.2, 0.1, 0.4]]))
        f = np.array([0.7, 0.2, 0.05])
        gains, losses, _ = reaction_rates(f, beta)
        for n in range(1, 4):
            self.assertAlmostEqual(gains[n - 1], gain(f, n, beta))
            self.assertAlmostEqual(losses[n - 1], loss(f, n, beta))

    def test_flux_balances_the_mass_rate(self):
        beta = BetaMatrix.constant(4, 1.0)
        f = np.array([1.0, 0.6, 0.3, 0.2])
        gains, losses, flux = reaction_rates(f, beta)
        weights = np.arange(1, 5)
        self.assertAlmostEqual(float(np.dot(weights, gains - losses)) + float(flux), 0.0, places=12)


class HomogeneousSolveTests(SimpleTestCase):
    def test_constant_kernel_matches_closed_form(self):
        m_max = 50
        beta = BetaMatrix.constant(m_max, 1.0)
        trajectory = solve(monomers(m_max), 1.0, 0.01, beta)
        np.testing.assert_allclose(trajectory.final.f, exact_constant_kernel(1.0, 1.0, m_max), atol=1e-6)

    def test_halving_the_step_cuts_the_error_sixteenfold(self):
        m_max = 60
        beta = BetaMatrix.constant(m_max, 1.0)
        exact = exact_constant_kernel(2.0, 1.0, m_max)
        errors = [
            float(np.max(np.abs(solve(monomers(m_max), 2.0, dt, beta).final.f - exact)))
            for dt in (0.2, 0.1, 0.05)
        ]
        for coarse, fine in zip(errors, errors[1:]):
            self.assertAlmostEqual(coarse / fine, 16.0, delta=3.0)

    def test_matches_reference_integrator(self):
        m_max = 50
        beta = BetaMatrix.constant(m_max, 0.5)

        def rhs(_, y):
            gains, losses, _ = reaction_rates(y, beta)
            return gains - losses

        reference = solve_ivp(rhs, (0.0, 2.0), monomers(m_max).f, method="DOP853", rtol=1e-12, atol=1e-14)
        trajectory = solve(monomers(m_max), 2.0, 0.005, beta)
        np.testing.assert_allclose(trajectory.final.f, reference.y[:, -1], atol=1e-6)

    def test_monodisperse_decay_with_half_beta(self):
        # halving beta turns the factor-two loss into df1/dt = -beta f1^2 at t = 0
        beta = BetaMatrix.constant(2, 4.0).scaled(0.5)
        field = monomers(2)
        gains, losses, _ = reaction_rates(field.f, beta)
        self.assertAlmostEqual(float(gains[0] - losses[0]), -4.0)

    def test_ledger_accounts_for_truncation(self):
        m_max = 5
        beta = BetaMatrix.constant(m_max, 1.0)
        trajectory = solve(monomers(m_max), 3.0, 0.01, beta)
        ledger = trajectory.ledger
        self.assertGreater(ledger.truncation_flux, 0.0)
        self.assertLess(ledger.current_mass, ledger.initial_mass)
        self.assertLess(ledger.relative_drift, 1e-10)
        self.assertTrue(np.all(trajectory.final.f >= 0.0))

    def test_snapshot_times_are_hit_exactly(self):
        beta = BetaMatrix.constant(4, 1.0)
        trajectory = solve(monomers(4), 1.0, 0.03, beta, snapshot_times=[0.25, 0.7])
        self.assertEqual(trajectory.times, [0.0, 0.25, 0.7, 1.0])
        self.assertIs(trajectory.at(0.7), trajectory.fields[2])
        with self.assertRaises(KeyError):
            trajectory.at(0.5)

    def test_homogeneous_field_from_densities(self):
        densities = InitialDensities((
            DensityComponent(1, "uniform", 6.0, lo=(0.0,) * 3, hi=(2.0,) * 3),
            DensityComponent(3, "uniform", 2.0, lo=(0.0,) * 3, hi=(2.0,) * 3),
        ))
        field = homogeneous_field(densities, 4, volume=8.0)
        np.testing.assert_allclose(field.f, [0.75, 0.0, 0.25, 0.0])
        self.assertAlmostEqual(field.total_mass(), 12.0)

    def test_broken_balance_is_detected(self):
        field = monomers(3)
        field.ledger = MassLedger(initial_mass=2.0, current_mass=2.0)
        with self.assertRaises(ConservationError):
            step_homogeneous(field, 0.01, BetaMatrix.constant(3, 1.0))


class SpatialSolveTests(SimpleTestCase):
    def test_torus_cosine_mode_decays(self):
        points, d, amplitude, horizon, dt = 64, 0.5, 0.1, 0.1, 2e-4
        grid = MacroGrid((points,), 1.0 / points, "torus")
        x = grid.axes[0]
        f0 = MacroField("spatial", np.stack([1.0 + amplitude * np.cos(2 * math.pi * x), np.zeros(points),
                                             np.zeros(points)]), grid=grid)
        beta = BetaMatrix.constant(3, 0.0)
        trajectory = solve(f0, horizon, dt, beta, DiffusionPolicy("constant", d))
        final = trajectory.final.f[0]
        mode = 2.0 * float(np.mean(final * np.cos(2 * math.pi * x)))
        steps = math.ceil(horizon / dt - 1e-9)
        h = horizon / steps
        eigenvalue = (2.0 - 2.0 * math.cos(2 * math.pi / points)) * points ** 2
        self.assertAlmostEqual(mode, amplitude * (1.0 - h * d * eigenvalue) ** steps, delta=1e-10)
        self.assertAlmostEqual(mode, amplitude * math.exp(-d * 4 * math.pi ** 2 * horizon), delta=1e-2 * amplitude)
        self.assertAlmostEqual(float(np.mean(final)), 1.0, places=12)

    def test_uniform_data_follow_homogeneous_solution(self):
        m_max, side, points = 6, 1.0, 4
        densities = InitialDensities((DensityComponent(1, "uniform", 2.0, lo=(0.0,) * 3, hi=(side,) * 3),))
        grid = MacroGrid((points,) * 3, side / points, "torus")
        beta = BetaMatrix.constant(m_max, 0.7)
        dd = DiffusionPolicy("constant", 0.5)
        spatial = solve(spatial_field(densities, m_max, grid), 0.5, 0.01, beta, dd).final
        homogeneous = solve(homogeneous_field(densities, m_max), 0.5, 0.005, beta).final
        for n in range(m_max):
            np.testing.assert_allclose(spatial.f[n], homogeneous.f[n], rtol=1e-9, atol=1e-14)
        self.assertLess(spatial.ledger.relative_drift, 1e-10)

    def test_zero_flux_boundary_keeps_mass(self):
        grid = MacroGrid((8, 8, 8), 0.125, "zero-flux")
        f = np.zeros((2, 8, 8, 8))
        f[0, :4] = 1.0
        field = MacroField("spatial", f, grid=grid)
        trajectory = solve(field, 0.1, 0.002, BetaMatrix.constant(2, 0.0), DiffusionPolicy("constant", 0.5))
        self.assertAlmostEqual(trajectory.final.total_mass(), field.total_mass(), places=10)
        self.assertLess(float(trajectory.final.f[0].max()), 1.0)

    def test_unstable_step_is_rejected(self):
        grid = MacroGrid((8, 8, 8), 0.125, "torus")
        field = MacroField("spatial", np.ones((2, 8, 8, 8)), grid=grid)
        with self.assertRaises(ValueError):
            solve(field, 0.1, 0.1, BetaMatrix.constant(2, 0.0), DiffusionPolicy("constant", 0.5))
