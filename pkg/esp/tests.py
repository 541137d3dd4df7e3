import tempfile
from dataclasses import replace
from pathlib import Path
from statistics import median
from unittest import mock

import numpy as np
from django.test import SimpleTestCase, tag

from .archive import write_run_archive
from .choices import Activation, Method, PolicyRule, PredictorKind, TargetScaling, TerminalKind
from .engine import (
    EspConfig,
    _OuterLoop,
    TrainingPool,
    discounted_returns,
    q_labels,
    run_direct_evolution,
    run_esp,
    surrogate_fitness,
)
from .environments import (
    RANDOM_AGENT,
    EpisodeTrace,
    FunctionEnv,
    Step,
    function_outcome,
    make_environment,
    rollout,
)
from .evolution import EvolutionConfig, next_generation
from .exceptions import ConfigError, ShapeError
from .metrics import episodes_to_target, regret_series
from .neuralnet import NetworkGenome, forward
from .predictors import ForestConfig, ForestPredictor, MlpConfig, MlpPredictor, Sample, TargetScale
from .serializers import ExperimentConfigSerializer


def make_trace(rewards, terminal=TerminalKind.NONE, width=4):
    steps = [
        Step(np.full(width, float(t)), np.array([1.0, 0.0]), float(r), t == len(rewards) - 1)
        for t, r in enumerate(rewards)
    ]
    return EpisodeTrace(steps, terminal)


def small_function_config(**overrides) -> EspConfig:
    base = EspConfig(
        domain="function",
        evolution=EvolutionConfig(population_size=10),
        prescriptor_hidden=(4,),
        predictor_kind=PredictorKind.MLP,
        predictor=MlpConfig(
            hidden_sizes=(8,), output_activation=Activation.LINEAR, epochs=20, batch_size=32,
            target_scaling=TargetScaling.STANDARDIZE,
        ),
        generations_per_predictor=2,
        elites_evaluated=1,
        episodes_per_elite=1,
        initial_random_episodes=5,
        max_episodes=15,
        evaluation_episodes=20,
        best_policy_rule=PolicyRule.POPULATION_TOP,
        seed=3,
    )
    return replace(base, **overrides)


class QLabelTests(SimpleTestCase):

    def test_matches_brute_force_summation(self):
        """Discounted labels agree with a direct sum over random reward sequences."""
        rng = np.random.default_rng(0)
        for episode in range(1000):
            gamma = (0.0, 0.5, 0.9, 1.0)[episode % 4]
            rewards = rng.uniform(-1, 1, size=int(rng.integers(1, 201)))
            samples = q_labels(make_trace(rewards), gamma)
            brute = [float(np.sum(rewards[t:] * gamma ** np.arange(rewards.size - t))) for t in range(rewards.size)]
            np.testing.assert_allclose([s.target for s in samples], brute, rtol=1e-12, atol=1e-12)

    def test_gamma_zero_is_the_immediate_reward(self):
        """With no discounting each label is just its own reward."""
        samples = q_labels(make_trace([1.0, 2.0, 3.0]), 0.0)
        self.assertEqual([s.target for s in samples], [1.0, 2.0, 3.0])

    def test_failure_shaping(self):
        """A failed episode ends on the negative bonus, which is discounted back."""
        samples = q_labels(make_trace([1.0, 1.0], TerminalKind.FAILURE), 0.9, terminal_bonus=2000.0)
        self.assertEqual(samples[-1].target, -2000.0)
        self.assertAlmostEqual(samples[0].target, 1.0 - 0.9 * 2000.0)

    def test_success_shaping(self):
        """A successful episode ends on the positive bonus."""
        samples = q_labels(make_trace([1.0] * 200, TerminalKind.SUCCESS), 0.9, terminal_bonus=2000.0)
        self.assertEqual(samples[-1].target, 2000.0)

    def test_no_bonus_leaves_rewards_alone(self):
        """Without a bonus a failure is labelled from the raw rewards."""
        samples = q_labels(make_trace([1.0, 1.0], TerminalKind.FAILURE), 1.0)
        self.assertEqual([s.target for s in samples], [2.0, 1.0])

    def test_samples_keep_context_and_action(self):
        """Each sample carries the observation and one-hot action of its step."""
        samples = q_labels(make_trace([1.0, 1.0]), 0.9)
        np.testing.assert_array_equal(samples[1].context, np.full(4, 1.0))
        np.testing.assert_array_equal(samples[1].action, [1.0, 0.0])

    def test_invalid_inputs(self):
        """An empty trace or a gamma above one is rejected."""
        with self.assertRaises(ShapeError):
            q_labels(EpisodeTrace(), 0.9)
        with self.assertRaises(ConfigError):
            q_labels(make_trace([1.0]), 1.5)

    def test_discounted_returns(self):
        """Returns are accumulated back to front."""
        np.testing.assert_allclose(discounted_returns([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])


class TrainingPoolTests(SimpleTestCase):

    def test_recency_cap_drops_oldest(self):
        """A full pool forgets its oldest samples first."""
        pool = TrainingPool(max_size=3)
        pool.add([Sample([float(i)], [0.0], 0.0) for i in range(5)])
        self.assertEqual(len(pool), 3)
        np.testing.assert_array_equal(pool.contexts()[:, 0], [2.0, 3.0, 4.0])

    def test_unbounded_pool_appends(self):
        """Without a cap every sample is kept."""
        pool = TrainingPool()
        pool.add([Sample([1.0], [0.0], 0.0)])
        pool.add([Sample([2.0], [0.0], 0.0)])
        self.assertEqual(len(pool), 2)


class SurrogateFitnessTests(SimpleTestCase):

    def setUp(self):
        # predicted outcome == prescribed action
        genome = NetworkGenome((2, 1), [0.0, 1.0], [0.0], output_activation=Activation.LINEAR)
        self.predictor = MlpPredictor(genome, TargetScale())
        self.prescriptor = NetworkGenome((1, 1), [1.0], [0.0], output_activation=Activation.TANH)

    def test_mean_predicted_outcome(self):
        """Fitness is the mean predicted outcome over the contexts."""
        contexts = np.array([[0.5], [-1.0]])
        expected = np.mean([10 * np.tanh(0.5), 10 * np.tanh(-1.0)])
        got = surrogate_fitness(self.prescriptor, self.predictor, contexts, FunctionEnv())
        self.assertAlmostEqual(got, float(expected), places=12)

    def test_needs_contexts(self):
        """Scoring against no contexts is an error."""
        with self.assertRaises(ShapeError):
            surrogate_fitness(self.prescriptor, self.predictor, np.zeros((0, 1)), FunctionEnv())


class EspConfigTests(SimpleTestCase):

    def test_requires_a_stopping_rule(self):
        """A run with neither a generation nor an episode limit is rejected."""
        with self.assertRaises(ConfigError):
            EspConfig(domain="cartpole")

    def test_gamma_range(self):
        """The discount factor must lie in [0, 1]."""
        with self.assertRaises(ConfigError):
            EspConfig(domain="cartpole", max_generations=1, gamma=1.1)

    def test_elites_fit_in_population(self):
        """More evaluated elites than population members is rejected."""
        with self.assertRaises(ConfigError):
            EspConfig(domain="cartpole", max_generations=1, elites_evaluated=60,
                      evolution=EvolutionConfig(population_size=50))


class EspLoopTests(SimpleTestCase):

    def test_function_run_respects_budget(self):
        """Every real episode is counted once and the budget is spent exactly."""
        result = run_esp(small_function_config())
        episodes = [p.episodes for p in result.series]
        self.assertEqual(episodes, list(range(1, len(episodes) + 1)))
        self.assertLessEqual(result.episodes_consumed, 15)
        self.assertEqual(result.episodes_consumed, 15)
        self.assertIsNotNone(result.best_policy)
        self.assertIsInstance(result.predictor, MlpPredictor)

    def test_random_agent_is_reported_before_any_prescriptor(self):
        """The initial random episodes report the random agent's performance."""
        result = run_esp(small_function_config())
        first = {p.true_performance for p in result.series[:5]}
        self.assertEqual(len(first), 1)
        self.assertTrue(all(p.generation == 0 for p in result.series[:5]))
        self.assertGreater(result.series[-1].generation, 0)

    def test_same_seed_same_run(self):
        """Two runs with one seed give the same curve and policy."""
        a = run_esp(small_function_config())
        b = run_esp(small_function_config())
        self.assertEqual(a.series, b.series)
        self.assertEqual(a.best_policy.fingerprint(), b.best_policy.fingerprint())

    def test_worker_count_does_not_change_the_run(self):
        """Threaded and serial runs are identical."""
        serial = run_esp(small_function_config())
        threaded = run_esp(small_function_config(), workers=3)
        self.assertEqual(serial.series, threaded.series)
        self.assertEqual(serial.best_policy.fingerprint(), threaded.best_policy.fingerprint())

    def test_progress_events(self):
        """Progress events open with run_start and close with run_end."""
        events = []
        run_esp(small_function_config(), events=events.append)
        kinds = [e["event"] for e in events]
        self.assertEqual(kinds[0], "run_start")
        self.assertEqual(kinds[-1], "run_end")
        self.assertIn("iteration", kinds)

    def test_cartpole_stops_at_target(self):
        """Reaching the target reward ends the run early."""
        cfg = EspConfig(
            domain="cartpole",
            evolution=EvolutionConfig(population_size=10),
            prescriptor_hidden=(4,),
            predictor=MlpConfig(hidden_sizes=(8,), epochs=5, batch_size=64),
            generations_per_predictor=1,
            elites_evaluated=2,
            episodes_per_elite=1,
            initial_random_episodes=3,
            terminal_bonus=2000.0,
            max_generations=50,
            target_reward=1.0,
            evaluation_episodes=5,
            seed=1,
        )
        result = run_esp(cfg)
        # every episode earns at least one reward, so the first elite block meets the target
        self.assertEqual(result.episodes_consumed, 5)
        self.assertEqual(result.best_policy.output_activation, Activation.ARGMAX)
        self.assertIsNotNone(result.best_real_fitness)

    def test_flappy_uses_a_forest(self):
        """A flappy run can use a random forest Predictor."""
        cfg = EspConfig(
            domain="flappy",
            evolution=EvolutionConfig(population_size=10),
            prescriptor_hidden=(6,),
            predictor_kind=PredictorKind.RANDOM_FOREST,
            predictor=ForestConfig(n_estimators=5, max_depth=6),
            generations_per_predictor=1,
            elites_evaluated=2,
            episodes_per_elite=2,
            initial_random_episodes=4,
            max_episodes=12,
            evaluation_episodes=2,
            max_pool_size=300,
            fitness_contexts=50,
            physics={"max_frames": 60},
            seed=2,
        )
        result = run_esp(cfg)
        self.assertIsInstance(result.predictor, ForestPredictor)
        self.assertEqual(result.episodes_consumed, 12)
        self.assertTrue(all(0.0 <= p.episode_reward <= 60.0 for p in result.series))


class OuterLoopInvariantTests(SimpleTestCase):

    def test_evaluation_episodes_leave_the_pool_alone(self):
        """Measuring a policy's true performance neither labels data nor spends budget."""
        loop = _OuterLoop(small_function_config(), Method.ESP, 1, None)
        for i in range(3):
            loop.consume(rollout(loop.env, RANDOM_AGENT, np.random.default_rng(i)), label=True)
        before = (len(loop.pool), loop.pool.episodes_consumed, len(loop.series))
        loop.set_returned(loop.initial_members().members[0])
        loop.set_returned(RANDOM_AGENT)
        self.assertEqual((len(loop.pool), loop.pool.episodes_consumed, len(loop.series)), before)

    def test_pool_holds_one_sample_per_training_episode(self):
        """Function episodes are one step long, so evaluation rollouts would show up as extra samples."""
        loop = _OuterLoop(small_function_config(), Method.ESP, 1, None)
        loop.run_esp()
        self.assertEqual(loop.pool.episodes_consumed, 15)
        self.assertEqual(len(loop.pool), 15)

    def test_best_real_policy_survives_every_bred_generation(self):
        """Once a real evaluation has happened, the best genome so far is in every new population."""
        loop = _OuterLoop(small_function_config(), Method.ESP, 1, None)
        kept = []

        def breed(scored, config, rng, protected=None):
            population = next_generation(scored, config, rng, protected)
            self.assertIs(protected, loop.best_real)
            if protected is not None:
                self.assertTrue(any(m.same_as(protected) for m in population.members))
                kept.append(protected)
            return population

        with mock.patch("esp.engine.next_generation", side_effect=breed):
            loop.run_esp()
        self.assertGreater(len(kept), 0)


class DirectEvolutionTests(SimpleTestCase):

    def test_spends_whole_generations(self):
        """Direct evolution never starts a generation it cannot pay for."""
        cfg = small_function_config(max_episodes=35, de_episodes_per_candidate=1)
        result = run_direct_evolution(cfg)
        self.assertEqual(result.episodes_consumed, 30)
        self.assertEqual(result.series[-1].generation, 2)
        self.assertIsNone(result.predictor)

    def test_generation_limit(self):
        """Direct evolution scores generation 0 and then the configured bred generations."""
        cfg = small_function_config(max_episodes=None, max_generations=2, de_episodes_per_candidate=2)
        result = run_direct_evolution(cfg)
        self.assertEqual(result.episodes_consumed, 3 * 10 * 2)
        # generation 0 plus two bred generations
        self.assertEqual(sorted({p.generation for p in result.series}), [0, 1, 2])

    def test_generation_limit_is_documented(self):
        """The config help text explains the extra generation."""
        help_text = ExperimentConfigSerializer().fields["max_generations"].help_text
        self.assertIn("max_generations + 1", help_text)

    def test_best_real_policy_is_returned(self):
        """The best_real rule returns the best genome measured on real episodes."""
        cfg = small_function_config(max_episodes=40, best_policy_rule=PolicyRule.BEST_REAL)
        result = run_direct_evolution(cfg)
        self.assertIsNotNone(result.best_real_fitness)
        self.assertIsNotNone(result.best_policy)


class ArchiveDeterminismTests(SimpleTestCase):

    def test_repeated_run_gives_identical_archive(self):
        """Archives of two identical runs are byte for byte equal."""
        with tempfile.TemporaryDirectory() as tmp:
            dirs = []
            for name, workers in (("a", 1), ("b", 2)):
                result = run_esp(small_function_config(), workers=workers)
                result.config = {"domain": "function", "seed": 3}
                dirs.append(write_run_archive(result, Path(tmp) / name))
            for path in sorted(dirs[0].iterdir()):
                self.assertEqual(path.read_bytes(), (dirs[1] / path.name).read_bytes(), path.name)


def full_function_config(method: str, seed: int, max_episodes: int) -> EspConfig:
    return EspConfig(
        domain="function",
        evolution=EvolutionConfig(),
        prescriptor_hidden=(32,),
        predictor=MlpConfig(
            hidden_sizes=(64, 64), output_activation=Activation.LINEAR, epochs=2000, batch_size=256,
            target_scaling=TargetScaling.STANDARDIZE,
        ),
        generations_per_predictor=20,
        elites_evaluated=1,
        episodes_per_elite=1,
        initial_random_episodes=10,
        max_episodes=max_episodes,
        success_threshold=-0.5,
        evaluation_episodes=1000,
        best_policy_rule=PolicyRule.POPULATION_TOP,
        seed=seed,
        method=method,
    )


def function_score(policy, n=1000) -> float:
    env = FunctionEnv()
    contexts = np.random.default_rng(12345).uniform(-10, 10, size=n)
    return float(np.mean([function_outcome(c, env.decode_output(forward(policy, [c]))) for c in contexts]))


@tag("slow")
class FunctionAcceptanceTests(SimpleTestCase):

    def test_esp_beats_direct_evolution(self):
        """On the function domain ESP beats direct evolution in final score and in regret."""
        esp = [run_esp(full_function_config("esp", seed, 300), workers=4) for seed in range(10)]
        de = [run_direct_evolution(full_function_config("de", seed, 1000), workers=4) for seed in range(10)]

        esp_scores = [function_score(r.best_policy) for r in esp]
        de_scores = [function_score(r.best_policy) for r in de]
        self.assertGreaterEqual(median(esp_scores), -0.5)
        self.assertGreaterEqual(sum(s >= -1.0 for s in esp_scores), 7)
        self.assertGreater(median(esp_scores), median(de_scores))

        env = make_environment("function")
        wins = 0
        for e, d in zip(esp, de):
            esp_regret = regret_series(e, env).cumulative_mean
            de_regret = regret_series(d, env)
            at_budget = de_regret.cumulative_mean[min(len(de_regret.cumulative_mean), 300) - 1]
            wins += esp_regret[-1] < 0.5 * at_budget
        self.assertGreaterEqual(wins, 8)


@tag("slow")
class CartPoleAcceptanceTests(SimpleTestCase):

    def config(self, method, seed):
        return EspConfig(
            domain="cartpole",
            evolution=EvolutionConfig(population_size=50),
            prescriptor_hidden=(32,),
            predictor=MlpConfig(hidden_sizes=(64, 64), epochs=1000, batch_size=256),
            generations_per_predictor=5,
            elites_evaluated=5,
            episodes_per_elite=5,
            initial_random_episodes=25,
            gamma=0.9,
            terminal_bonus=2000.0,
            max_generations=160,
            max_episodes=800,
            target_reward=200.0,
            success_threshold=195.0,
            de_episodes_per_candidate=5,
            evaluation_episodes=100,
            seed=seed,
            method=method,
        )

    def test_esp_reaches_target_sooner(self):
        """On cart-pole ESP hits the target reward in fewer episodes."""
        esp = [run_esp(self.config("esp", s), workers=4) for s in range(10)]
        de = [run_direct_evolution(replace(self.config("de", s), max_episodes=None), workers=4) for s in range(10)]
        esp_hits = [episodes_to_target(r, 195.0) for r in esp]
        de_hits = [episodes_to_target(r, 195.0) for r in de]
        self.assertGreaterEqual(sum(h is not None and h <= 800 for h in esp_hits), 7)

        def mean_hit(hits, runs):
            # runs that never reach the target count with their whole budget
            return np.mean([h if h is not None else r.episodes_consumed for h, r in zip(hits, runs)])

        self.assertLess(mean_hit(esp_hits, esp), mean_hit(de_hits, de))


@tag("slow")
class FlappyAcceptanceTests(SimpleTestCase):

    def config(self, method, seed, max_episodes):
        return EspConfig(
            domain="flappy",
            evolution=EvolutionConfig(),
            prescriptor_hidden=(128,),
            predictor_kind=PredictorKind.RANDOM_FOREST,
            predictor=ForestConfig(n_estimators=100),
            generations_per_predictor=1,
            elites_evaluated=10,
            episodes_per_elite=10,
            initial_random_episodes=100,
            max_episodes=max_episodes,
            de_episodes_per_candidate=10,
            evaluation_episodes=10,
            max_pool_size=20000,
            fitness_contexts=1000,
            physics={"max_frames": 1000},
            seed=seed,
            method=method,
        )

    def test_esp_dominates_direct_evolution_with_half_the_episodes(self):
        """On flappy ESP beats direct evolution that is given twice the episodes."""
        wins = 0
        esp_final, de_final = [], []
        for seed in range(10):
            esp = run_esp(self.config("esp", seed, 20000), workers=4)
            de = run_direct_evolution(self.config("de", seed, 40000), workers=4)
            esp_final.append(esp.final_true_performance)
            de_final.append(de.final_true_performance)
            wins += esp.final_true_performance > de.final_true_performance
        self.assertGreater(median(esp_final), median(de_final))
        self.assertGreaterEqual(wins, 7)
