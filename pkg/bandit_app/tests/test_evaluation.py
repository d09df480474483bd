import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose
from scipy.stats import chisquare, poisson

from bandit_app.exceptions import ConfigError, DomainError, StrategyError
from bandit_app.services.core_model import ParameterPoint, Prior
from bandit_app.services.dp_solver import SolverConfig, StrategyTable, solve_v1
from bandit_app.services.evaluation import (
    IntervalRecord,
    Trajectory,
    bayes_average,
    constant_strategy,
    evaluate_exact,
    evaluate_grid,
    greedy_strategy,
    regret_truncation_budget,
    replication_rng,
    sample_trajectory,
    simulate,
    simulate_prior,
)


SYMMETRIC = Prior.from_rows([(1.0, 2.0, 0.5), (2.0, 1.0, 0.5)])


class ExactEvaluationTests(SimpleTestCase):
    def test_constant_arms(self):
        config = SolverConfig(horizon_T=1.0, steps_N=4, xmax=20)
        theta = ParameterPoint(1.0, 2.0)
        self.assertAlmostEqual(evaluate_exact(constant_strategy(1, config), theta, config), 1.0, delta=1e-8)
        self.assertAlmostEqual(evaluate_exact(constant_strategy(2, config), theta, config), 0.0, delta=1e-12)

    def test_constant_arm_regret_is_linear_in_horizon(self):
        for horizon in (0.5, 2.0):
            config = SolverConfig(horizon_T=horizon, steps_N=5, xmax=25)
            theta = ParameterPoint(2.5, 0.5)
            assert_allclose(evaluate_exact(constant_strategy(2, config), theta, config), 2.0 * horizon, atol=1e-8)

    def test_uncovered_theta_is_rejected(self):
        config = SolverConfig(horizon_T=2.0, steps_N=4, xmax=10)
        strategy = constant_strategy(1, config)
        with self.assertRaises(ConfigError):
            evaluate_exact(strategy, ParameterPoint(10.0, 11.0), config)
        with self.assertRaises(ConfigError):
            evaluate_grid(strategy, [ParameterPoint(1.0, 2.0), ParameterPoint(10.0, 11.0)], config)

    def test_truncation_budget(self):
        config = SolverConfig(horizon_T=1.0, steps_N=4, xmax=20)
        self.assertEqual(regret_truncation_budget(ParameterPoint(1.5, 1.5), config), 0.0)
        budget = regret_truncation_budget(ParameterPoint(1.0, 2.0), config)
        assert_allclose(budget, 2.0 * poisson.sf(20, 2.0), rtol=1e-12)
        self.assertLess(budget, config.tail_eps)

    def test_bayes_average_equals_root_risk(self):
        config = SolverConfig(horizon_T=1.0, steps_N=10, xmax=20)
        solution = solve_v1(SYMMETRIC, config)
        assert_allclose(bayes_average(solution.strategy, SYMMETRIC, config), solution.root_risk, rtol=1e-9)

    def test_bayes_average_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(5):
            size = int(rng.integers(1, 5))
            weights = rng.dirichlet(np.ones(size))
            weights[-1] = 1.0 - math.fsum(weights[:-1].tolist())
            rates = rng.uniform(0.0, 5.0, size=(size, 2))
            prior = Prior.from_rows([(a, b, w) for (a, b), w in zip(rates.tolist(), weights.tolist())])
            config = SolverConfig(horizon_T=float(rng.uniform(0.25, 1.0)), steps_N=int(rng.integers(1, 6)), xmax=25)
            solution = solve_v1(prior, config)
            assert_allclose(bayes_average(solution.strategy, prior, config), solution.root_risk, rtol=1e-9, atol=1e-14)

    def test_bayesian_strategy_beats_heuristics(self):
        config = SolverConfig(horizon_T=1.0, steps_N=6, xmax=20)
        optimal = bayes_average(solve_v1(SYMMETRIC, config).strategy, SYMMETRIC, config)
        for strategy in (constant_strategy(1, config), constant_strategy(2, config), greedy_strategy(SYMMETRIC, config)):
            self.assertGreaterEqual(bayes_average(strategy, SYMMETRIC, config), optimal - 1e-12)

    def test_threads_do_not_change_results(self):
        config = SolverConfig(horizon_T=1.0, steps_N=4, xmax=20)
        strategy = solve_v1(SYMMETRIC, config).strategy
        points = [ParameterPoint(1.0, 2.0), ParameterPoint(2.0, 1.0), ParameterPoint(1.5, 1.5)]
        assert_allclose(evaluate_grid(strategy, points, config, workers=3), evaluate_grid(strategy, points, config))

    def test_undefined_reachable_state(self):
        prior = Prior.from_rows([(0.0, 1.0, 0.5), (0.0, 2.0, 0.5)])
        config = SolverConfig(horizon_T=1.0, steps_N=3, xmax=15)
        strategy = solve_v1(prior, config).strategy
        self.assertAlmostEqual(evaluate_exact(strategy, ParameterPoint(0.0, 1.0), config), 0.0, delta=1e-12)
        strategy.actions[(0, 0)] = np.ones_like(strategy.actions[(0, 0)])
        with self.assertRaises(StrategyError) as error:
            evaluate_exact(strategy, ParameterPoint(1.0, 1.0), config)
        self.assertEqual(error.exception.state[0], 1)

    def test_missing_node(self):
        config = SolverConfig(horizon_T=1.0, steps_N=3, xmax=15)
        strategy = constant_strategy(1, config)
        del strategy.actions[(1, 1)]
        with self.assertRaises(StrategyError):
            evaluate_exact(strategy, ParameterPoint(1.0, 2.0), config)

    def test_lattice_mismatch(self):
        strategy = constant_strategy(1, SolverConfig(horizon_T=1.0, steps_N=3, xmax=15))
        with self.assertRaises(StrategyError):
            evaluate_exact(strategy, ParameterPoint(1.0, 2.0), SolverConfig(horizon_T=1.0, steps_N=4, xmax=15))


class MonteCarloTests(SimpleTestCase):
    def test_constant_arm_one(self):
        config = SolverConfig(horizon_T=1.0, steps_N=4, xmax=20)
        estimate = simulate(constant_strategy(1, config), ParameterPoint(1.0, 2.0), config, 100_000, seed=12345)
        self.assertLessEqual(abs(estimate.mean - 1.0), 4 * estimate.std_error)

    def test_identical_arms_have_no_regret(self):
        config = SolverConfig(horizon_T=1.0, steps_N=4, xmax=20)
        strategy = solve_v1(SYMMETRIC, config).strategy
        estimate = simulate(strategy, ParameterPoint(1.0, 1.0), config, 100_000, seed=7)
        self.assertLessEqual(abs(estimate.mean), 4 * estimate.std_error)

    def test_prior_mixed_estimate_matches_root_risk(self):
        config = SolverConfig(horizon_T=1.0, steps_N=10, xmax=20)
        solution = solve_v1(SYMMETRIC, config)
        estimate = simulate_prior(solution.strategy, SYMMETRIC, config, 100_000, seed=2024)
        self.assertLessEqual(abs(estimate.mean - solution.root_risk), 4 * estimate.std_error)

    def test_matches_exact_evaluation(self):
        config = SolverConfig(horizon_T=1.0, steps_N=10, xmax=20)
        strategy = solve_v1(SYMMETRIC, config).strategy
        theta = ParameterPoint(1.0, 2.0)
        estimate = simulate(strategy, theta, config, 50_000, seed=99)
        self.assertLessEqual(abs(estimate.mean - evaluate_exact(strategy, theta, config)), 4 * estimate.std_error)

    def test_reproducible_across_workers(self):
        config = SolverConfig(horizon_T=1.0, steps_N=5, xmax=20)
        strategy = solve_v1(SYMMETRIC, config).strategy
        theta = ParameterPoint(2.0, 1.0)
        serial = simulate(strategy, theta, config, 2_000, seed=42)
        self.assertEqual(serial, simulate(strategy, theta, config, 2_000, seed=42))
        self.assertEqual(serial, simulate(strategy, theta, config, 2_000, seed=42, workers=3))
        self.assertNotEqual(serial.mean, simulate(strategy, theta, config, 2_000, seed=43).mean)

    def test_invalid_arguments(self):
        config = SolverConfig(horizon_T=1.0, steps_N=2, xmax=10)
        strategy = constant_strategy(1, config)
        with self.assertRaises(DomainError):
            simulate(strategy, ParameterPoint(1.0, 1.0), config, 0, seed=1)
        with self.assertRaises(DomainError):
            simulate(strategy, ParameterPoint(1.0, 1.0), config, 10, seed=-1)

    def test_increments_follow_poisson_law(self):
        rng = replication_rng(31, 0)
        rate = 1.7
        samples = rng.poisson(rate, size=50_000)
        observed = np.bincount(np.minimum(samples, 6), minlength=7)
        expected = poisson.pmf(np.arange(6), rate)
        expected = np.append(expected, poisson.sf(5, rate)) * samples.size
        self.assertGreater(chisquare(observed, expected).pvalue, 1e-3)


class TrajectoryTests(SimpleTestCase):
    def test_totals_match_increments(self):
        config = SolverConfig(horizon_T=1.0, steps_N=10, xmax=20)
        strategy = solve_v1(SYMMETRIC, config).strategy
        trajectory = sample_trajectory(strategy, ParameterPoint(1.0, 2.0), config, seed=5)
        self.assertEqual(len(trajectory.records), 10)
        self.assertEqual([r.interval for r in trajectory.records], list(range(10)))
        self.assertEqual(trajectory.records[0].action, strategy.action(0, 0, 0, 0))

    def test_inconsistent_totals_rejected(self):
        records = (IntervalRecord(0, 1, 2), IntervalRecord(1, 2, 1))
        self.assertEqual(Trajectory(records, 2, 1).total1, 2)
        with self.assertRaises(DomainError):
            Trajectory(records, 3, 1)
        with self.assertRaises(DomainError):
            Trajectory((IntervalRecord(0, 1, -1),), -1, 0)

    def test_same_seed_same_trajectory(self):
        config = SolverConfig(horizon_T=1.0, steps_N=10, xmax=20)
        strategy = solve_v1(SYMMETRIC, config).strategy
        theta = ParameterPoint(1.0, 2.0)
        self.assertEqual(
            sample_trajectory(strategy, theta, config, seed=5, replication=3),
            sample_trajectory(strategy, theta, config, seed=5, replication=3),
        )
