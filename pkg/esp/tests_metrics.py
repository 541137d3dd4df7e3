import numpy as np
from django.test import SimpleTestCase

from .environments import RANDOM_AGENT, CartPoleEnv, FunctionEnv
from .exceptions import ConfigError
from .metrics import (
    RunResult,
    SeriesPoint,
    aggregate_runs,
    cumulative_mean,
    episodes_to_target,
    moving_average,
    regret_series,
    true_performance,
)


def make_run(rewards, performance=None, domain="cartpole", method="esp", seed=0, optimum=200.0):
    performance = performance if performance is not None else rewards
    series = [
        SeriesPoint(i + 1, 0, float(r), optimum - float(r), float(p))
        for i, (r, p) in enumerate(zip(rewards, performance))
    ]
    return RunResult(method=method, domain=domain, seed=seed, series=series)


class TruePerformanceTests(SimpleTestCase):

    def test_mean_of_fresh_rollouts(self):
        """Random cart-pole performance lies between 0 and 200."""
        env = CartPoleEnv()
        score = true_performance(RANDOM_AGENT, env, 20, np.random.default_rng(0))
        self.assertGreater(score, 0.0)
        self.assertLessEqual(score, 200.0)

    def test_same_stream_same_score(self):
        """The same evaluation stream gives the same score."""
        env = FunctionEnv()
        a = true_performance(RANDOM_AGENT, env, 50, np.random.default_rng(4))
        b = true_performance(RANDOM_AGENT, env, 50, np.random.default_rng(4))
        self.assertEqual(a, b)
        self.assertLessEqual(a, 0.0)

    def test_needs_an_episode(self):
        """Evaluating with zero episodes is an error."""
        with self.assertRaises(ConfigError):
            true_performance(RANDOM_AGENT, FunctionEnv(), 0, np.random.default_rng(0))


class RegretTests(SimpleTestCase):

    def test_cartpole_regret(self):
        """Cart-pole regret is the shortfall from 200."""
        run = make_run([150.0, 200.0])
        regret = regret_series(run, CartPoleEnv())
        np.testing.assert_array_equal(regret.instantaneous, [50.0, 0.0])

    def test_function_regret(self):
        """Function regret is the distance from the optimal action."""
        run = make_run([-2.0, 0.0], domain="function", optimum=0.0)
        regret = regret_series(run, FunctionEnv())
        np.testing.assert_array_equal(regret.instantaneous, [2.0, 0.0])

    def test_environment_built_from_run_config(self):
        """Without an explicit environment the run's own physics set the optimum."""
        run = make_run([10.0])
        run.config = {"physics": {"max_steps": 20}}
        self.assertEqual(float(regret_series(run).instantaneous[0]), 10.0)

    def test_moving_average_window(self):
        """The moving average covers a trailing window and is partial at the start."""
        values = np.arange(1.0, 6.0)
        np.testing.assert_allclose(moving_average(values, window=2), [1.0, 1.5, 2.5, 3.5, 4.5])

    def test_cumulative_mean_matches_brute_force(self):
        """The cumulative regret matches a running mean."""
        values = np.random.default_rng(1).uniform(0, 200, size=500)
        brute = [values[: i + 1].mean() for i in range(values.size)]
        np.testing.assert_allclose(cumulative_mean(values), brute, rtol=0, atol=1e-9)

    def test_regret_is_never_negative(self):
        """Regret is never below zero."""
        run = make_run(np.random.default_rng(2).integers(1, 201, size=300))
        regret = regret_series(run, CartPoleEnv())
        self.assertTrue(np.all(regret.instantaneous >= 0))
        self.assertTrue(np.all(regret.moving_average >= 0))


class EpisodesToTargetTests(SimpleTestCase):

    def test_first_crossing(self):
        """Episodes to target is the first point at or above it."""
        run = make_run([0, 0, 0, 0], performance=[20.0, 196.0, 150.0, 199.0])
        self.assertEqual(episodes_to_target(run, 195.0), 2)

    def test_never_reached(self):
        """A target that is never met gives None."""
        run = make_run([0, 0], performance=[1.0, 2.0])
        self.assertIsNone(episodes_to_target(run, 195.0))
        self.assertIsNone(episodes_to_target(run, None))


class AggregateTests(SimpleTestCase):

    def test_single_run_has_zero_std(self):
        """One run aggregates to itself with zero spread."""
        table = aggregate_runs([make_run(np.arange(50.0))])
        self.assertTrue(all(row.std == 0.0 for row in table.rows))
        self.assertEqual([row.episodes for row in table.rows], [10, 20, 30, 40, 50])

    def test_two_constant_runs(self):
        """Runs at 100 and 200 give mean 150 and std of about 70.71."""
        table = aggregate_runs([make_run([100.0] * 30), make_run([200.0] * 30, seed=1)])
        for row in table.rows:
            self.assertAlmostEqual(row.mean, 150.0)
            self.assertAlmostEqual(row.std, 70.71067811865476)
            self.assertEqual(row.n_runs, 2)

    def test_shorter_run_holds_its_last_value(self):
        """A run that stops early keeps its final value to the end of the grid."""
        table = aggregate_runs([make_run([10.0] * 20), make_run([30.0] * 40, seed=1)])
        self.assertEqual(table.rows[-1].episodes, 40)
        self.assertAlmostEqual(table.rows[-1].mean, 20.0)

    def test_interpolates_onto_the_grid(self):
        """Series are sampled every tenth episode."""
        run = make_run([0.0] * 20, performance=list(np.arange(1.0, 21.0)))
        rows = aggregate_runs([run]).rows
        self.assertEqual(rows[0].mean, 10.0)
        self.assertEqual(rows[1].mean, 20.0)

    def test_regret_metric(self):
        """Curves can aggregate regret as well as performance."""
        table = aggregate_runs([make_run([150.0] * 10)], metric="regret_cumulative")
        self.assertEqual(table.rows[0].mean, 50.0)
        self.assertEqual(table.as_dicts()[0], {"episodes": 10, "mean": 50.0, "std": 0.0, "n_runs": 1})

    def test_mixed_domains_rejected(self):
        """Runs from different domains cannot be averaged."""
        with self.assertRaises(ConfigError):
            aggregate_runs([make_run([1.0]), make_run([1.0], domain="function")])

    def test_mixed_methods_rejected(self):
        """Runs of different methods cannot be averaged."""
        with self.assertRaises(ConfigError):
            aggregate_runs([make_run([1.0]), make_run([1.0], method="de")])

    def test_unknown_metric(self):
        """An unknown metric name is rejected."""
        with self.assertRaises(ConfigError):
            aggregate_runs([make_run([1.0] * 10)], metric="sharpe")

    def test_needs_runs(self):
        """Aggregating nothing is an error."""
        with self.assertRaises(ConfigError):
            aggregate_runs([])
