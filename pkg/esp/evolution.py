"""Fixed-topology genetic algorithm over NetworkGenome parameter vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, InvalidArchitectureError
from .neuralnet import NetworkGenome, init_network


@dataclass(frozen=True)
class EvolutionConfig:
    population_size: int = 100
    elite_fraction: float = 0.10
    parent_fraction: float = 0.20
    mutation_rate: float = 0.10
    mutation_factor_mean: float = 1.0
    mutation_factor_std: float = 0.1
    tournament_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 1:
            raise ConfigError("population_size must be positive.")
        if not 0 < self.elite_fraction <= 1 or not 0 < self.parent_fraction <= 1:
            raise ConfigError("elite_fraction and parent_fraction must lie in (0, 1].")
        if not 0 <= self.mutation_rate <= 1:
            raise ConfigError("mutation_rate must lie in [0, 1].")
        if self.tournament_size < 1:
            raise ConfigError("tournament_size must be positive.")
        if self.parent_pool_size < 2:
            raise ConfigError(
                f"parent pool of {self.parent_pool_size} is too small; need at least 2 parents."
            )

    @property
    def elite_count(self) -> int:
        return max(1, math.ceil(self.elite_fraction * self.population_size - 1e-9))

    @property
    def parent_pool_size(self) -> int:
        return math.ceil(self.parent_fraction * self.population_size - 1e-9)


@dataclass
class ScoredPopulation:
    members: list[NetworkGenome]
    fitnesses: list[float] | None = None
    generation: int = 0

    def __post_init__(self):
        if self.fitnesses is not None:
            if len(self.fitnesses) != len(self.members):
                raise ConfigError(
                    f"{len(self.members)} members but {len(self.fitnesses)} fitness values."
                )
            if not all(math.isfinite(f) for f in self.fitnesses):
                raise ConfigError("Fitness values must be finite.")

    @property
    def is_scored(self) -> bool:
        return self.fitnesses is not None

    def ranking(self) -> np.ndarray:
        """Member indices, fittest first; ties keep the lower index first."""
        return np.argsort(-np.asarray(self.fitnesses, dtype=np.float64), kind="stable")

    def best(self) -> tuple[NetworkGenome, float]:
        top = int(self.ranking()[0])
        return self.members[top], float(self.fitnesses[top])

    def contains(self, genome: NetworkGenome) -> bool:
        return any(m.same_as(genome) for m in self.members)


def initial_population(
    layer_sizes: Sequence[int],
    hidden_activation: str,
    output_activation: str,
    config: EvolutionConfig,
) -> ScoredPopulation:
    seeds = np.random.SeedSequence(config.seed).spawn(config.population_size)
    members = [init_network(layer_sizes, hidden_activation, output_activation, s) for s in seeds]
    return ScoredPopulation(members)


def uniform_crossover(parent_a: NetworkGenome, parent_b: NetworkGenome, rng: np.random.Generator) -> NetworkGenome:
    if parent_a.architecture != parent_b.architecture:
        raise InvalidArchitectureError(
            f"Cannot cross {list(parent_a.layer_sizes)} with {list(parent_b.layer_sizes)}."
        )
    a, b = parent_a.parameters, parent_b.parameters
    take_a = rng.random(a.size) < 0.5
    return parent_a.with_parameters(np.where(take_a, a, b))


def mutate(genome: NetworkGenome, config: EvolutionConfig, rng: np.random.Generator) -> NetworkGenome:
    params = genome.parameters
    hit = rng.random(params.size) < config.mutation_rate
    if not hit.any():
        return genome
    factors = rng.normal(config.mutation_factor_mean, config.mutation_factor_std, size=int(hit.sum()))
    params[hit] = params[hit] * factors
    return genome.with_parameters(params)


def _tournament(pool: np.ndarray, config: EvolutionConfig, rng: np.random.Generator) -> int:
    # pool is ordered fittest first, so the smallest position wins
    contestants = rng.integers(0, pool.size, size=config.tournament_size)
    return int(pool[contestants.min()])


def next_generation(
    scored: ScoredPopulation,
    config: EvolutionConfig,
    rng: np.random.Generator,
    protected: NetworkGenome | None = None,
) -> ScoredPopulation:
    """Elites carried verbatim, the rest bred from the top parent pool; result is unscored."""
    if not scored.is_scored:
        raise ConfigError("next_generation needs a scored population.")
    n = len(scored.members)
    n_elite = config.elite_count
    if n < n_elite:
        raise ConfigError(f"Population of {n} is smaller than the elite count {n_elite}.")

    ranking = scored.ranking()
    members = [scored.members[i] for i in ranking[:n_elite]]
    if protected is not None and not any(m.same_as(protected) for m in members):
        members[-1] = protected

    pool = ranking[:max(2, min(config.parent_pool_size, n))]
    while len(members) < n:
        mother = scored.members[_tournament(pool, config, rng)]
        father = scored.members[_tournament(pool, config, rng)]
        members.append(mutate(uniform_crossover(mother, father, rng), config, rng))

    return ScoredPopulation(members, None, scored.generation + 1)
