import math

import numpy as np
from django.test import SimpleTestCase

from kinetics.cell import (
    CellSolver,
    beta_hard_core,
    build_grid,
    capacity_ball,
    capacity_reference,
    capacity_unit_ball,
    compute_beta,
    compute_beta_solution,
    curve_is_monotone,
    effective_rate_curve,
    eval_u,
    newtonian_convolve,
    newtonian_potential_of_v,
    solve_cell_problem,
)
from kinetics.core import DiffusionPolicy, RatePolicy, make_kernel, newton_constant
from kinetics.exceptions import CellSolveError


def uniform_ball_rate(alpha_prime):
    """F for V = 1{|x| < 1} / |B| in d = 3, where the cell problem has a closed form."""
    s = math.sqrt(alpha_prime * 3.0 / (4.0 * math.pi))
    return 4.0 * math.pi * (1.0 - math.tanh(s) / s)


class NewtonianPotentialTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.grid = build_grid(make_kernel(3, "uniform"), "radial", n_shells=50)

    def test_unit_density_on_the_ball(self):
        ones = np.ones(self.grid.size)
        self.assertAlmostEqual(newtonian_convolve(self.grid, ones, 2.0), 1.0 / 6.0, places=12)
        self.assertAlmostEqual(newtonian_convolve(self.grid, ones, 0.5), 2.75 / 6.0, places=12)

    def test_potential_of_v_outside_the_support(self):
        value = newtonian_potential_of_v(self.grid, 2.0)
        self.assertAlmostEqual(value, newton_constant(3) / 2.0, places=13)

    def test_grid_carries_unit_mass(self):
        self.assertAlmostEqual(self.grid.integrate(self.grid.v_values), 1.0, places=13)
        self.assertAlmostEqual(self.grid.volume, 4.0 * math.pi / 3.0, places=12)


class CellSolverTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.kernel = make_kernel(3, "bump")
        cls.grid = build_grid(cls.kernel, "radial", n_shells=200)
        cls.solver = CellSolver(cls.grid, tol=1e-8)

    def test_solutions_stay_in_range_with_small_residual(self):
        for alpha_prime in (1e-3, 1.0, 10.0, 1e3):
            solution = self.solver.solve(alpha_prime)
            self.assertLessEqual(solution.residual, 1e-8)
            self.assertGreaterEqual(solution.min_u, -1.0 - 1e-9)
            self.assertLessEqual(solution.max_u, 1e-9)

    def test_weak_coupling_matches_first_order_expansion(self):
        alpha_prime = 1e-3
        solution = self.solver.solve(alpha_prime)
        first_order = -alpha_prime * newtonian_potential_of_v(self.grid)
        self.assertLess(np.max(np.abs(solution.u_values - first_order)), 1e-6)

    def test_far_field_is_newtonian(self):
        solution = self.solver.solve(10.0)
        for r in (1.5, 2.0, 7.0):
            self.assertAlmostEqual(eval_u(solution, r), -solution.far_field_constant / r, places=12)

    def test_solutions_are_memoized(self):
        self.assertIs(self.solver.solve(3.0), self.solver.solve(3.0))

    def test_zero_coupling(self):
        solution = self.solver.solve(0.0)
        self.assertEqual(solution.f_of_beta, 0.0)
        self.assertAlmostEqual(solution.absorption, 1.0, places=12)
        self.assertEqual(eval_u(solution, 0.3), 0.0)

    def test_unreachable_tolerance_raises(self):
        with self.assertRaises(CellSolveError) as caught:
            CellSolver(build_grid(self.kernel, "radial", n_shells=40), tol=1e-30).solve(10.0)
        self.assertIsNotNone(caught.exception.residual)

    def test_negative_coupling_is_rejected(self):
        with self.assertRaises(ValueError):
            self.solver.solve(-1.0)


class UniformBallTests(SimpleTestCase):
    def test_radial_solver_matches_closed_form(self):
        kernel = make_kernel(3, "uniform")
        solution = solve_cell_problem(kernel, 10.0, build_grid(kernel, "radial", n_shells=400))
        self.assertAlmostEqual(solution.f_of_beta, uniform_ball_rate(10.0), delta=1e-3 * uniform_ball_rate(10.0))

    def test_radial_error_shrinks_at_second_order(self):
        kernel = make_kernel(3, "uniform")
        exact = uniform_ball_rate(10.0)
        errors = [
            abs(solve_cell_problem(kernel, 10.0, build_grid(kernel, "radial", n_shells=shells)).f_of_beta - exact)
            for shells in (100, 200, 400)
        ]
        self.assertGreater(errors[0], errors[1])
        self.assertGreater(errors[1], errors[2])
        # halving the shell width divides the error by about four
        self.assertGreater(errors[1] / errors[2], 2.5)
        self.assertLess(errors[1] / errors[2], 6.0)

    def test_cartesian_grid_agrees_with_radial(self):
        kernel = make_kernel(3, "quartic")
        radial = solve_cell_problem(kernel, 10.0, build_grid(kernel, "radial", n_shells=200))
        cartesian = solve_cell_problem(kernel, 10.0, build_grid(kernel, "cartesian", cells_per_axis=16), tol=1e-6)
        self.assertAlmostEqual(cartesian.f_of_beta, radial.f_of_beta, delta=0.1 * radial.f_of_beta)


class EffectiveRateTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.kernel = make_kernel(3, "bump")
        cls.solver = CellSolver(build_grid(cls.kernel, "radial", n_shells=400))

    def test_curve_is_monotone_and_below_capacity(self):
        curve = effective_rate_curve(self.kernel, 1.0, [0.1, 1.0, 10.0, 100.0, 1e3, 1e4], solver=self.solver)
        capacity = capacity_reference(self.kernel).value
        self.assertTrue(curve_is_monotone(curve))
        for _, value in curve:
            self.assertLessEqual(value, capacity + 1e-6)
        self.assertGreaterEqual(curve[-1][1], 0.95 * capacity)

    def test_weak_coupling_rate_is_alpha_prime(self):
        (_, value), = effective_rate_curve(self.kernel, 1.0, [1e-4], solver=self.solver)
        self.assertAlmostEqual(value, 1e-4, delta=1e-6)

    def test_unsorted_alphas_are_rejected(self):
        with self.assertRaises(ValueError):
            effective_rate_curve(self.kernel, 1.0, [10.0, 1.0], solver=self.solver)

    def test_dd_sum_rescales_the_coupling(self):
        (coupling, _), = effective_rate_curve(self.kernel, 4.0, [8.0], solver=self.solver)
        self.assertEqual(coupling, 2.0)


class BetaTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.kernel = make_kernel(3, "bump")
        cls.solver = CellSolver(build_grid(cls.kernel, "radial", n_shells=200))
        cls.dd = DiffusionPolicy("power", 1.0, -1.0 / 3.0)

    def test_beta_is_symmetric(self):
        alpha = RatePolicy("product", 2.0)
        self.assertEqual(
            compute_beta(1, 3, self.kernel, alpha, self.dd, solver=self.solver),
            compute_beta(3, 1, self.kernel, alpha, self.dd, solver=self.solver),
        )

    def test_beta_bounds(self):
        for c in (0.1, 10.0, 1e3):
            alpha = RatePolicy("constant", c)
            for n, m in ((1, 1), (1, 4), (3, 5)):
                beta = compute_beta(n, m, self.kernel, alpha, self.dd, solver=self.solver)
                self.assertGreater(beta, 0.0)
                self.assertLessEqual(beta, c * (1 + 1e-12))
                self.assertLessEqual(beta, beta_hard_core(n, m, self.dd, self.kernel) + 1e-6)

    def test_zero_alpha_gives_zero_beta(self):
        self.assertEqual(compute_beta(1, 2, self.kernel, RatePolicy("constant", 0.0), self.dd), 0.0)

    def test_solution_carries_beta(self):
        alpha = RatePolicy("constant", 5.0)
        solution = compute_beta_solution(2, 2, alpha, self.dd, self.solver)
        self.assertEqual(solution.alpha, 5.0)
        self.assertAlmostEqual(solution.beta, compute_beta(2, 2, self.kernel, alpha, self.dd, solver=self.solver))


class CapacityTests(SimpleTestCase):
    def test_unit_ball(self):
        self.assertAlmostEqual(capacity_unit_ball(3), 4.0 * math.pi, places=13)
        self.assertAlmostEqual(capacity_unit_ball(4), 4.0 * math.pi ** 2, places=12)

    def test_scaling_with_radius(self):
        self.assertAlmostEqual(capacity_ball(3, 2.0), 8.0 * math.pi, places=12)
        self.assertEqual(capacity_reference(make_kernel(3, "bump", support_radius=2.0)).set_descriptor,
                         "ball of radius 2")

    def test_low_dimension_is_rejected(self):
        with self.assertRaises(ValueError):
            capacity_unit_ball(2)
