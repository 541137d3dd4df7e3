"""True performance, regret and multi-run aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .environments import Environment, RandomAgent, make_environment, rollout
from .exceptions import ConfigError
from .neuralnet import NetworkGenome
from .predictors import PredictorModel

REGRET_WINDOW = 100
GRID_STEP = 10


@dataclass(frozen=True)
class SeriesPoint:
    episodes: int
    generation: int
    episode_reward: float
    regret: float
    true_performance: float


@dataclass(eq=False)
class RunResult:
    method: str
    domain: str
    seed: int
    series: list[SeriesPoint] = field(default_factory=list)
    best_policy: NetworkGenome | None = None
    best_real_fitness: float | None = None
    predictor: PredictorModel | None = None
    config: dict[str, Any] = field(default_factory=dict)
    wall_time: float | None = None

    @property
    def episodes_consumed(self) -> int:
        return self.series[-1].episodes if self.series else 0

    @property
    def final_true_performance(self) -> float | None:
        return self.series[-1].true_performance if self.series else None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.series], dtype=np.float64)


def true_performance(
    policy: NetworkGenome | RandomAgent,
    env: Environment,
    n_episodes: int,
    rng: np.random.Generator,
) -> float:
    """Mean total reward over fresh rollouts; never touches a training pool."""
    if n_episodes < 1:
        raise ConfigError("n_episodes must be at least 1.")
    return float(np.mean([rollout(env, policy, rng).total_reward for _ in range(n_episodes)]))


def moving_average(values: Sequence[float], window: int = REGRET_WINDOW) -> np.ndarray:
    """Mean over the trailing ``window`` values (fewer at the start)."""
    v = np.asarray(values, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(v)])
    ends = np.arange(1, v.size + 1)
    starts = np.maximum(0, ends - window)
    return (csum[ends] - csum[starts]) / (ends - starts)


def cumulative_mean(values: Sequence[float]) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.cumsum(v) / np.arange(1, v.size + 1)


@dataclass(frozen=True)
class RegretSeries:
    episodes: np.ndarray
    instantaneous: np.ndarray
    moving_average: np.ndarray
    cumulative_mean: np.ndarray


def regret_series(run: RunResult, env: Environment | None = None, window: int = REGRET_WINDOW) -> RegretSeries:
    if env is None:
        env = make_environment(run.domain, run.config.get("physics"))
    regret = env.optimum_reward - run.column("episode_reward")
    return RegretSeries(run.column("episodes"), regret, moving_average(regret, window), cumulative_mean(regret))


def episodes_to_target(run: RunResult, threshold: float | None) -> int | None:
    if threshold is None:
        return None
    for point in run.series:
        if point.true_performance >= threshold:
            return point.episodes
    return None


METRICS = ("true_performance", "regret_moving", "regret_cumulative")


def metric_values(run: RunResult, metric: str) -> tuple[np.ndarray, np.ndarray]:
    if metric == "true_performance":
        return run.column("episodes"), run.column("true_performance")
    regret = regret_series(run)
    if metric == "regret_moving":
        return regret.episodes, regret.moving_average
    if metric == "regret_cumulative":
        return regret.episodes, regret.cumulative_mean
    raise ConfigError(f"Unknown metric {metric!r}; choose one of {', '.join(METRICS)}.")


@dataclass(frozen=True)
class CurveRow:
    episodes: int
    mean: float
    std: float
    n_runs: int


@dataclass(frozen=True)
class CurveTable:
    method: str
    domain: str
    metric: str
    rows: tuple[CurveRow, ...]

    def as_dicts(self) -> list[dict[str, Any]]:
        return [{"episodes": r.episodes, "mean": r.mean, "std": r.std, "n_runs": r.n_runs} for r in self.rows]


def aggregate_runs(
    runs: Sequence[RunResult],
    metric: str = "true_performance",
    grid_step: int = GRID_STEP,
) -> CurveTable:
    """Interpolate every run onto a shared episode grid; pointwise mean and sample std."""
    if not runs:
        raise ConfigError("aggregate_runs needs at least one run.")
    domains = {r.domain for r in runs}
    methods = {r.method for r in runs}
    if len(domains) > 1 or len(methods) > 1:
        raise ConfigError(
            f"Cannot aggregate runs across domains {sorted(domains)} / methods {sorted(methods)}."
        )
    curves = [metric_values(r, metric) for r in runs if r.series]
    if not curves:
        raise ConfigError("None of the runs has any recorded episodes.")
    last = max(int(episodes[-1]) for episodes, _ in curves)
    grid = np.arange(grid_step, last + 1, grid_step)
    if grid.size == 0:
        grid = np.array([last])
    # runs that stopped early hold their final value
    values = np.stack([np.interp(grid, episodes, vals) for episodes, vals in curves])
    mean = values.mean(axis=0)
    std = values.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros_like(mean)
    rows = tuple(
        CurveRow(int(e), float(m), float(s), len(curves)) for e, m, s in zip(grid, mean, std)
    )
    return CurveTable(runs[0].method, runs[0].domain, metric, rows)
