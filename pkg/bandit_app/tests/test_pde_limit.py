import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from bandit_app.exceptions import ConfigError, DomainError
from bandit_app.services.core_model import ParameterPoint, Prior, State
from bandit_app.services.dp_solver import Recursion, SolverConfig, solve_v2
from bandit_app.services.pde_limit import (
    LinearizedConfig,
    fallback_cells,
    linear_coefficients,
    node_residual,
    pde_residual,
    residual_audit,
    solve_linearized,
    switch_band,
)


SYMMETRIC = Prior.from_rows([(1.0, 2.0, 0.5), (2.0, 1.0, 0.5)])
REFINEMENT = (8, 16, 32, 64)


class LinearizedConfigTests(SimpleTestCase):
    def test_default_floor_is_one_step(self):
        config = LinearizedConfig(horizon_T=1.0, steps_N=4, xmax=10)
        self.assertEqual(config.t_floor, 0.25)

    def test_invalid_floor(self):
        for t_floor in (0.0, -0.5, 2.0):
            with self.subTest(t_floor=t_floor), self.assertRaises(ConfigError):
                LinearizedConfig(horizon_T=1.0, steps_N=4, xmax=10, t_floor=t_floor)

    def test_coefficients(self):
        stay, up = linear_coefficients(3, 1.0, 0.25)
        assert_allclose(stay, [1.0, 0.75, 0.5, 0.25])
        assert_allclose(up, [0.25, 0.5, 0.75, 1.0])


class SolveLinearizedTests(SimpleTestCase):
    def test_single_atom_has_zero_risk(self):
        prior = Prior.point_mass(ParameterPoint(1.0, 2.0))
        solution = solve_linearized(prior, LinearizedConfig(horizon_T=1.0, steps_N=8, xmax=15))
        self.assertEqual(solution.root_risk, 0.0)
        self.assertIs(solution.risk.version, Recursion.LINEARIZED)

    def test_one_step(self):
        for horizon in (1.0, 0.5):
            config = LinearizedConfig(horizon_T=horizon, steps_N=1, xmax=20)
            self.assertAlmostEqual(solve_linearized(SYMMETRIC, config).root_risk, 0.5 * horizon, places=12)

    def test_floor_at_horizon_matches_exact_recursion(self):
        config = LinearizedConfig(horizon_T=1.0, steps_N=4, xmax=20, t_floor=1.0)
        exact = solve_v2(SYMMETRIC, SolverConfig(horizon_T=1.0, steps_N=4, xmax=20)).root_risk
        assert_allclose(solve_linearized(SYMMETRIC, config).root_risk, exact, rtol=1e-12)


class RefinementTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.gaps = []
        cls.residuals = []
        for steps in REFINEMENT:
            config = LinearizedConfig(horizon_T=1.0, steps_N=steps, xmax=20, t_floor=0.25)
            linear = solve_linearized(SYMMETRIC, config)
            exact = solve_v2(SYMMETRIC, SolverConfig(horizon_T=1.0, steps_N=steps, xmax=20))
            cls.gaps.append(abs(linear.root_risk - exact.root_risk))
            cls.residuals.append(residual_audit(linear.risk, linear.strategy, SYMMETRIC, config))

    def test_gap_to_exact_recursion_shrinks(self):
        for coarse, fine in zip(self.gaps, self.gaps[1:]):
            self.assertGreater(fine, 0.0)
            self.assertLessEqual(fine, 0.75 * coarse)

    def test_residual_decreases(self):
        worst = [audit.max_abs_residual for audit in self.residuals]
        for coarse, fine in zip(worst, worst[1:]):
            self.assertLessEqual(fine, 1.1 * coarse)
        self.assertLess(worst[-1], worst[1])
        for audit in self.residuals:
            self.assertGreater(audit.audited_states, 0)


class DefaultFloorRefinementTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.audits = []
        for steps in REFINEMENT:
            config = LinearizedConfig(horizon_T=1.0, steps_N=steps, xmax=20)
            linear = solve_linearized(SYMMETRIC, config)
            cls.audits.append(residual_audit(linear.risk, linear.strategy, SYMMETRIC, config, min_time=0.375))

    def test_residual_decreases(self):
        worst = [audit.max_abs_residual for audit in self.audits]
        for coarse, fine in zip(worst, worst[1:]):
            self.assertLessEqual(fine, 1.1 * coarse)
        self.assertLess(worst[-1], worst[1])

    def test_fallback_cells_are_not_audited(self):
        config = LinearizedConfig(horizon_T=1.0, steps_N=8, xmax=20)
        solution = solve_linearized(SYMMETRIC, config)
        cells = fallback_cells(config, 2, 3)
        self.assertFalse(cells[:3, :4].any())
        self.assertTrue(cells[3:, :].all())
        self.assertTrue(cells[:, 4:].all())
        everything = residual_audit(solution.risk, solution.strategy, SYMMETRIC, config)
        self.assertGreater(everything.audited_states, 0)
        self.assertGreater(everything.excluded_states, self.audits[0].excluded_states)


class ResidualTests(SimpleTestCase):
    def setUp(self):
        self.config = LinearizedConfig(horizon_T=1.0, steps_N=8, xmax=15, t_floor=0.25)

    def test_single_atom_residual_is_zero(self):
        prior = Prior.point_mass(ParameterPoint(1.0, 2.0))
        solution = solve_linearized(prior, self.config)
        residual = pde_residual(solution.risk, prior, self.config, State(1, 0.375, 1, 0.5))
        self.assertAlmostEqual(residual, 0.0, delta=1e-12)
        audit = residual_audit(solution.risk, solution.strategy, prior, self.config)
        self.assertAlmostEqual(audit.max_abs_residual, 0.0, delta=1e-12)

    def test_floor_state_is_not_interior(self):
        solution = solve_linearized(SYMMETRIC, self.config)
        with self.assertRaises(DomainError):
            pde_residual(solution.risk, SYMMETRIC, self.config, State(0, 0.25, 0, 0.5))
        with self.assertRaises(DomainError):
            pde_residual(solution.risk, SYMMETRIC, self.config, State(15, 0.375, 0, 0.375))

    def test_node_residual_matches_scalar(self):
        solution = solve_linearized(SYMMETRIC, self.config)
        grid = node_residual(solution.risk, SYMMETRIC, self.config, 3, 3)
        self.assertEqual(grid.shape, (15, 15))
        for x1, x2 in [(0, 0), (1, 2), (4, 0)]:
            scalar = pde_residual(solution.risk, SYMMETRIC, self.config, State(x1, 0.375, x2, 0.375))
            assert_allclose(grid[x1, x2], scalar, rtol=1e-9, atol=1e-15)

    def test_switch_band_marks_action_changes(self):
        solution = solve_linearized(SYMMETRIC, self.config)
        band = switch_band(solution.strategy, 3, 3)
        actions = solution.strategy.node(3, 3)
        changes = np.argwhere(np.diff(actions, axis=0) != 0)
        for x1, x2 in changes:
            self.assertTrue(band[x1, x2])
            self.assertTrue(band[x1 + 1, x2])

    def test_audit_needs_full_table(self):
        solution = solve_linearized(SYMMETRIC, self.config, keep_tables=False)
        with self.assertRaises(DomainError):
            residual_audit(solution.risk, solution.strategy, SYMMETRIC, self.config)
