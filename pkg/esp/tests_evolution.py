import numpy as np
from django.test import SimpleTestCase

from .choices import Activation
from .evolution import (
    EvolutionConfig,
    ScoredPopulation,
    initial_population,
    mutate,
    next_generation,
    uniform_crossover,
)
from .exceptions import ConfigError, InvalidArchitectureError
from .neuralnet import NetworkGenome, init_network


def quadratic(genome: NetworkGenome) -> float:
    return -float(np.sum((genome.parameters - 0.5) ** 2))


def score(population: ScoredPopulation) -> ScoredPopulation:
    return ScoredPopulation(population.members, [quadratic(m) for m in population.members], population.generation)


class ConfigTests(SimpleTestCase):

    def test_defaults(self):
        """The default GA settings."""
        cfg = EvolutionConfig()
        self.assertEqual(cfg.elite_count, 10)
        self.assertEqual(cfg.parent_pool_size, 20)
        self.assertEqual(cfg.tournament_size, 2)

    def test_elite_count_is_at_least_one(self):
        """A tiny elite fraction still keeps one elite."""
        self.assertEqual(EvolutionConfig(population_size=10, elite_fraction=0.01).elite_count, 1)

    def test_parent_pool_too_small(self):
        """A parent pool of one genome is rejected."""
        with self.assertRaises(ConfigError):
            EvolutionConfig(population_size=5, parent_fraction=0.2)

    def test_fractions_validated(self):
        """A zero elite fraction or a mutation rate above one is rejected."""
        with self.assertRaises(ConfigError):
            EvolutionConfig(elite_fraction=0.0)
        with self.assertRaises(ConfigError):
            EvolutionConfig(mutation_rate=1.5)


class CrossoverTests(SimpleTestCase):

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.a = NetworkGenome((3, 4, 2), np.zeros(20), np.zeros(6))
        self.b = NetworkGenome((3, 4, 2), np.ones(20), np.ones(6))

    def test_identical_parents(self):
        """Crossing a genome with itself gives the same genome."""
        g = init_network([3, 4, 2], seed=1)
        self.assertTrue(uniform_crossover(g, g, self.rng).same_as(g))

    def test_child_takes_each_parameter_from_a_parent(self):
        """Every child parameter comes from one of the two parents."""
        a = init_network([3, 4, 2], seed=1)
        b = init_network([3, 4, 2], seed=2)
        child = uniform_crossover(a, b, self.rng).parameters
        self.assertTrue(np.all((child == a.parameters) | (child == b.parameters)))

    def test_bit_pattern_reproducible(self):
        """The crossover mask depends only on the RNG."""
        first = uniform_crossover(self.a, self.b, np.random.default_rng(42)).parameters
        second = uniform_crossover(self.a, self.b, np.random.default_rng(42)).parameters
        np.testing.assert_array_equal(first, second)
        self.assertTrue(0 < first.sum() < first.size)

    def test_architecture_mismatch(self):
        """Parents with different shapes cannot be crossed."""
        with self.assertRaises(InvalidArchitectureError):
            uniform_crossover(self.a, init_network([3, 5, 2], seed=0), self.rng)


class MutateTests(SimpleTestCase):

    def test_rate_zero_is_identity(self):
        """A zero mutation rate changes nothing."""
        g = init_network([4, 8, 2], seed=3)
        out = mutate(g, EvolutionConfig(mutation_rate=0.0), np.random.default_rng(0))
        self.assertTrue(out.same_as(g))

    def test_factor_multiplies(self):
        """Mutation multiplies the hit parameters."""
        g = NetworkGenome((1, 1), [2.0], [0.0])
        cfg = EvolutionConfig(mutation_rate=1.0, mutation_factor_mean=1.1, mutation_factor_std=0.0)
        self.assertAlmostEqual(float(mutate(g, cfg, np.random.default_rng(0)).weights[0]), 2.2, places=12)

    def test_hit_fraction_matches_rate(self):
        """At rate 0.1 about a tenth of the parameters change."""
        g = NetworkGenome((1000, 100), np.ones(100_000), np.ones(100))
        out = mutate(g, EvolutionConfig(mutation_rate=0.1), np.random.default_rng(5))
        changed = np.count_nonzero(out.parameters != g.parameters) / g.parameter_count
        self.assertGreaterEqual(changed, 0.094)
        self.assertLessEqual(changed, 0.106)

    def test_architecture_preserved(self):
        """Mutation keeps the layer sizes and activations."""
        g = init_network([4, 8, 2], output_activation=Activation.ARGMAX, seed=3)
        out = mutate(g, EvolutionConfig(mutation_rate=0.5), np.random.default_rng(1))
        self.assertEqual(out.architecture, g.architecture)


class NextGenerationTests(SimpleTestCase):

    def setUp(self):
        self.cfg = EvolutionConfig(population_size=100, seed=7)
        self.population = score(initial_population((2, 4, 1), Activation.TANH, Activation.TANH, self.cfg))

    def test_elites_copied_verbatim(self):
        """Elites pass to the next generation unchanged."""
        nxt = next_generation(self.population, self.cfg, np.random.default_rng(0))
        ranking = self.population.ranking()
        for slot in range(10):
            self.assertTrue(nxt.members[slot].same_as(self.population.members[ranking[slot]]))
        self.assertEqual(len(nxt.members), 100)
        self.assertEqual(nxt.generation, 1)
        self.assertFalse(nxt.is_scored)

    def test_ties_keep_index_order(self):
        """Equal fitness ranks by position."""
        flat = ScoredPopulation(self.population.members, [0.0] * 100)
        nxt = next_generation(flat, self.cfg, np.random.default_rng(0))
        for slot in range(10):
            self.assertTrue(nxt.members[slot].same_as(flat.members[slot]))

    def test_protected_genome_is_inserted(self):
        """A protected genome missing from the elites takes the last elite slot."""
        outsider = init_network([2, 4, 1], seed=999)
        self.assertFalse(self.population.contains(outsider))
        nxt = next_generation(self.population, self.cfg, np.random.default_rng(0), protected=outsider)
        self.assertTrue(nxt.members[9].same_as(outsider))
        self.assertTrue(nxt.members[0].same_as(self.population.best()[0]))

    def test_protected_elite_not_duplicated(self):
        """A protected genome that is already an elite is not added twice."""
        best = self.population.best()[0]
        nxt = next_generation(self.population, self.cfg, np.random.default_rng(0), protected=best)
        self.assertEqual(sum(m.same_as(best) for m in nxt.members[:10]), 1)

    def test_unscored_population_rejected(self):
        """Breeding needs fitness values."""
        with self.assertRaises(ConfigError):
            next_generation(ScoredPopulation(self.population.members), self.cfg, np.random.default_rng(0))

    def test_same_seed_same_generation(self):
        """Breeding with one seed is deterministic."""
        a = next_generation(self.population, self.cfg, np.random.default_rng(3))
        b = next_generation(self.population, self.cfg, np.random.default_rng(3))
        self.assertTrue(all(x.same_as(y) for x, y in zip(a.members, b.members)))

    def test_long_run_invariants(self):
        """Over 200 generations the size holds and the protected genome never drops out."""
        cfg = EvolutionConfig(population_size=20, seed=1)
        rng = np.random.default_rng(11)
        protected = init_network([2, 3, 1], seed=12345)
        scored = score(initial_population((2, 3, 1), Activation.TANH, Activation.TANH, cfg))
        best = scored.best()[1]
        for _ in range(200):
            elites = [scored.members[i] for i in scored.ranking()[:cfg.elite_count]]
            nxt = score(next_generation(scored, cfg, rng, protected))

            self.assertEqual(len(nxt.members), 20)
            self.assertTrue(nxt.contains(protected))
            self.assertTrue(nxt.members[0].same_as(elites[0]))
            self.assertTrue(all(m.architecture == protected.architecture for m in nxt.members))
            self.assertGreaterEqual(nxt.best()[1], best)
            best = nxt.best()[1]
            scored = nxt
        # selection pressure actually moves the population toward the optimum
        self.assertGreater(best, quadratic(init_network([2, 3, 1], seed=0)))
