"""
The ESP outer loops and the Direct Evolution baseline.

Every random draw comes from a stream keyed by (run seed, purpose, indices), so
results do not depend on how many worker threads evaluate candidates or in
which order the pool schedules them.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .choices import Activation, Method, PolicyRule, PredictorKind, TargetScaling, TerminalKind
from .environments import (
    RANDOM_AGENT,
    Environment,
    EpisodeTrace,
    RandomAgent,
    make_environment,
    prescribe_batch,
    rollout,
)
from .evolution import EvolutionConfig, ScoredPopulation, initial_population, next_generation
from .exceptions import ConfigError, ShapeError
from .metrics import RunResult, SeriesPoint, true_performance
from .neuralnet import NetworkGenome, forward_batch
from .predictors import ForestConfig, MlpConfig, PredictorModel, Sample, fit_predictor, q_bound

logger = logging.getLogger(__name__)

# random stream purposes
INIT, GA, INITIAL, ELITE, FIT, CONTEXTS, EVAL, DIRECT = range(1, 9)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(keys)))


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1, np.uint32)[0])


@dataclass(frozen=True)
class EspConfig:
    domain: str
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    prescriptor_hidden: tuple[int, ...] = (32,)
    predictor_kind: str = PredictorKind.MLP
    predictor: MlpConfig | ForestConfig = field(default_factory=MlpConfig)
    generations_per_predictor: int = 5
    elites_evaluated: int = 5
    episodes_per_elite: int = 5
    initial_random_episodes: int = 25
    gamma: float = 0.9
    terminal_bonus: float = 0.0
    max_generations: int | None = None
    max_episodes: int | None = None
    target_reward: float | None = None
    success_threshold: float | None = None
    de_episodes_per_candidate: int = 1
    evaluation_episodes: int = 100
    best_policy_rule: str = PolicyRule.BEST_REAL
    max_pool_size: int | None = None
    fitness_contexts: int | None = None
    physics: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    method: str = Method.ESP

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}.")
        for name in (
            "generations_per_predictor", "elites_evaluated", "episodes_per_elite",
            "de_episodes_per_candidate", "evaluation_episodes",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive.")
        if self.initial_random_episodes < 0:
            raise ConfigError("initial_random_episodes must not be negative.")
        if self.max_generations is None and self.max_episodes is None:
            raise ConfigError("Set max_generations or max_episodes so the run always terminates.")
        if self.elites_evaluated > self.evolution.population_size:
            raise ConfigError("elites_evaluated cannot exceed the population size.")


@dataclass
class TrainingPool:
    samples: list[Sample] = field(default_factory=list)
    episodes_consumed: int = 0
    max_size: int | None = None

    def add(self, samples: Sequence[Sample]):
        self.samples.extend(samples)
        if self.max_size is not None and len(self.samples) > self.max_size:
            # keep the most recent experience
            del self.samples[: len(self.samples) - self.max_size]

    def contexts(self) -> np.ndarray:
        return np.array([s.context for s in self.samples])

    def __len__(self) -> int:
        return len(self.samples)


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def q_labels(
    trace: EpisodeTrace,
    gamma: float,
    terminal_bonus: float = 0.0,
    encode: Callable[[np.ndarray], np.ndarray] | None = None,
) -> list[Sample]:
    """One Sample per step with the discounted future reward as target (raw units)."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}.")
    if len(trace) == 0:
        raise ShapeError("Cannot label an empty trace.")
    rewards = trace.rewards
    if terminal_bonus:
        failed = trace.terminal_kind == TerminalKind.FAILURE
        rewards[-1] = -terminal_bonus if failed else terminal_bonus
    targets = discounted_returns(rewards, gamma)
    encode = encode or (lambda obs: obs)
    return [Sample(encode(s.observation), s.action, q) for s, q in zip(trace.steps, targets)]


def surrogate_fitness(
    genome: NetworkGenome,
    predictor: PredictorModel,
    contexts: np.ndarray,
    env: Environment | None = None,
) -> float:
    """Mean predicted outcome of the actions ``genome`` prescribes for ``contexts``."""
    contexts = np.asarray(contexts, dtype=np.float64)
    if contexts.ndim != 2 or contexts.shape[0] == 0:
        raise ShapeError("surrogate_fitness needs a non-empty 2-d context matrix.")
    if env is not None:
        actions = prescribe_batch(env, genome, contexts)
    else:
        actions = forward_batch(genome, contexts)
    return float(np.mean(predictor.predict_batch(np.hstack([contexts, actions]))))


class _OuterLoop:
    """Mutable bookkeeping for one seeded run; owned by a single thread."""

    def __init__(self, config: EspConfig, method: str, workers: int, events):
        self.config = config
        self.method = method
        self.env = make_environment(config.domain, config.physics)
        self.workers = max(1, int(workers))
        self.events = events
        self.pool = TrainingPool(max_size=config.max_pool_size)
        self.series: list[SeriesPoint] = []
        self.generation = 0
        self.refits = 0
        self.best_real: NetworkGenome | None = None
        self.best_real_fitness: float | None = None
        self.returned: NetworkGenome | RandomAgent = RANDOM_AGENT
        self.returned_performance = 0.0
        self._performance_cache: dict[str, float] = {}
        self.ga_rng = rng_for(config.seed, GA)
        self.evolution = replace(config.evolution, seed=derive_seed(config.seed, INIT))
        self.predictor: PredictorModel | None = None
        self.contexts: np.ndarray | None = None
        self._executor: ThreadPoolExecutor | None = None

    # ---- plumbing ----

    def map(self, fn, items):
        items = list(items)
        if self._executor is None:
            return [fn(item) for item in items]
        return list(self._executor.map(fn, items))

    def emit(self, event: str, **payload):
        if self.events is not None:
            self.events({"event": event, "method": str(self.method), "domain": str(self.config.domain),
                         "seed": self.config.seed, **payload})

    def budget_allows(self, episodes: int) -> bool:
        limit = self.config.max_episodes
        return limit is None or self.pool.episodes_consumed + episodes <= limit

    def generations_left(self) -> bool:
        limit = self.config.max_generations
        return limit is None or self.generation < limit

    def consume(self, trace: EpisodeTrace, label: bool):
        self.pool.episodes_consumed += 1
        reward = trace.total_reward
        self.series.append(SeriesPoint(
            self.pool.episodes_consumed, self.generation, reward,
            self.env.optimum_reward - reward, self.returned_performance,
        ))
        if label:
            self.pool.add(q_labels(trace, self.config.gamma, self.config.terminal_bonus, self.env.encode))

    def performance_of(self, policy) -> float:
        key = "random" if isinstance(policy, RandomAgent) else policy.fingerprint()
        if key not in self._performance_cache:
            self._performance_cache[key] = true_performance(
                policy, self.env, self.config.evaluation_episodes, rng_for(self.config.seed, EVAL)
            )
        return self._performance_cache[key]

    def set_returned(self, policy):
        self.returned = policy
        self.returned_performance = self.performance_of(policy)

    def note_real_fitness(self, genome: NetworkGenome, fitness: float):
        # strictly better only: ties keep the earlier discovery
        if self.best_real_fitness is None or fitness > self.best_real_fitness:
            self.best_real, self.best_real_fitness = genome, fitness

    def choose_returned(self, scored: ScoredPopulation):
        if self.config.best_policy_rule == PolicyRule.POPULATION_TOP or self.best_real is None:
            self.set_returned(scored.best()[0])
        else:
            self.set_returned(self.best_real)

    def target_met(self, fitness: float) -> bool:
        return self.config.target_reward is not None and fitness >= self.config.target_reward

    def result(self, started: float) -> RunResult:
        return RunResult(
            method=self.method,
            domain=self.config.domain,
            seed=self.config.seed,
            series=self.series,
            best_policy=None if isinstance(self.returned, RandomAgent) else self.returned,
            best_real_fitness=self.best_real_fitness,
            predictor=self.predictor,
            wall_time=time.perf_counter() - started,
        )

    def initial_members(self) -> ScoredPopulation:
        sizes = (self.env.observation_size, *self.config.prescriptor_hidden, self.env.action_size)
        return initial_population(sizes, Activation.TANH, self.env.prescriptor_output_activation(), self.evolution)

    # ---- surrogate side ----

    def predictor_config(self):
        cfg = replace(self.config.predictor, seed=derive_seed(self.config.seed, FIT, self.refits))
        if cfg.target_scaling == TargetScaling.BOUND and cfg.target_bound is None:
            cfg = replace(cfg, target_bound=q_bound(
                self.env.max_steps, self.config.gamma, 1.0, self.config.terminal_bonus
            ))
        return cfg

    def refit(self):
        started = time.perf_counter()
        self.predictor = fit_predictor(
            self.pool.samples, self.config.predictor_kind, self.predictor_config(), self.workers
        )
        contexts = self.pool.contexts()
        cap = self.config.fitness_contexts
        if cap is not None and contexts.shape[0] > cap:
            rows = rng_for(self.config.seed, CONTEXTS, self.refits).choice(contexts.shape[0], cap, replace=False)
            contexts = contexts[np.sort(rows)]
        self.contexts = contexts
        logger.debug(
            "Refit %s predictor #%d on %d samples in %.2fs",
            self.config.predictor_kind, self.refits, len(self.pool), time.perf_counter() - started,
        )
        self.refits += 1

    def score(self, population: ScoredPopulation) -> ScoredPopulation:
        fitnesses = self.map(
            lambda g: surrogate_fitness(g, self.predictor, self.contexts, self.env), population.members
        )
        return ScoredPopulation(population.members, fitnesses, population.generation)

    # ---- loops ----

    def run_esp(self) -> RunResult:
        cfg = self.config
        started = time.perf_counter()
        self.emit("run_start")
        self.set_returned(RANDOM_AGENT)

        n_initial = cfg.initial_random_episodes
        if cfg.max_episodes is not None:
            n_initial = min(n_initial, cfg.max_episodes)
        traces = self.map(
            lambda i: rollout(self.env, RANDOM_AGENT, rng_for(cfg.seed, INITIAL, i)), range(n_initial)
        )
        for trace in traces:
            self.consume(trace, label=True)
        if not self.pool.samples:
            raise ConfigError("ESP needs at least one initial random episode to fit its first Predictor.")

        self.refit()
        scored = self.score(self.initial_members())
        block = cfg.elites_evaluated * cfg.episodes_per_elite

        while self.generations_left() and self.budget_allows(block):
            for _ in range(cfg.generations_per_predictor):
                if not self.generations_left():
                    break
                population = next_generation(scored, self.evolution, self.ga_rng, self.best_real)
                self.generation += 1
                scored = self.score(population)

            ranking = scored.ranking()[: cfg.elites_evaluated]
            tasks = [(rank, ep) for rank in range(len(ranking)) for ep in range(cfg.episodes_per_elite)]
            traces = self.map(
                lambda t: rollout(
                    self.env, scored.members[ranking[t[0]]], rng_for(cfg.seed, ELITE, self.generation, *t)
                ),
                tasks,
            )
            totals = np.zeros(len(ranking))
            for (rank, _), trace in zip(tasks, traces):
                self.consume(trace, label=True)
                totals[rank] += trace.total_reward
            elite_fitness = totals / cfg.episodes_per_elite
            for rank, fitness in enumerate(elite_fitness):
                self.note_real_fitness(scored.members[ranking[rank]], float(fitness))

            self.choose_returned(scored)
            self.log_progress()
            if any(self.target_met(f) for f in elite_fitness):
                logger.info("Target reward reached after %d episodes", self.pool.episodes_consumed)
                break

            self.refit()
            scored = self.score(ScoredPopulation(scored.members, None, scored.generation))

        result = self.result(started)
        self.emit("run_end", episodes=self.pool.episodes_consumed, true_performance=self.returned_performance)
        return result

    def run_direct(self) -> RunResult:
        cfg = self.config
        started = time.perf_counter()
        self.emit("run_start")
        self.set_returned(RANDOM_AGENT)
        population = self.initial_members()
        n = len(population.members)
        k = cfg.de_episodes_per_candidate

        while self.budget_allows(n * k):
            tasks = [(i, ep) for i in range(n) for ep in range(k)]
            traces = self.map(
                lambda t: rollout(
                    self.env, population.members[t[0]], rng_for(cfg.seed, DIRECT, self.generation, *t)
                ),
                tasks,
            )
            totals = np.zeros(n)
            for (i, _), trace in zip(tasks, traces):
                self.consume(trace, label=False)
                totals[i] += trace.total_reward
            scored = ScoredPopulation(population.members, [float(t) for t in totals / k], population.generation)

            top, top_fitness = scored.best()
            self.note_real_fitness(top, top_fitness)
            self.choose_returned(scored)
            self.log_progress()
            if self.target_met(top_fitness) or not self.generations_left():
                break
            population = next_generation(scored, self.evolution, self.ga_rng, self.best_real)
            self.generation += 1

        result = self.result(started)
        self.emit("run_end", episodes=self.pool.episodes_consumed, true_performance=self.returned_performance)
        return result

    def log_progress(self):
        logger.info(
            "%s %s seed=%s gen=%d episodes=%d best_real=%s true_perf=%.4f",
            self.method, self.config.domain, self.config.seed, self.generation,
            self.pool.episodes_consumed, self.best_real_fitness, self.returned_performance,
        )
        self.emit(
            "iteration",
            generation=self.generation,
            episodes=self.pool.episodes_consumed,
            best_real_fitness=self.best_real_fitness,
            true_performance=self.returned_performance,
            pool_size=len(self.pool),
        )


def _execute(config: EspConfig, method: str, workers: int, events) -> RunResult:
    loop = _OuterLoop(config, method, workers, events)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="esp") as executor:
            loop._executor = executor
            return loop.run_esp() if method == Method.ESP else loop.run_direct()
    return loop.run_esp() if method == Method.ESP else loop.run_direct()


def run_esp(config: EspConfig, workers: int = 1, events: Callable[[dict], None] | None = None) -> RunResult:
    return _execute(config, Method.ESP, workers, events)


def run_direct_evolution(
    config: EspConfig, workers: int = 1, events: Callable[[dict], None] | None = None
) -> RunResult:
    return _execute(config, Method.DE, workers, events)
