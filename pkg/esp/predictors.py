"""
Predictor surrogates P(context, action) -> outcome.

Two interchangeable models: an MLP trained with the neuralnet module and a
CART random forest. Both keep the target scaling they were fitted with and
answer in the original target units.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .choices import Activation, PredictorKind, TargetScaling
from .exceptions import ConfigError, ShapeError
from .neuralnet import Architecture, NetworkGenome, TrainConfig, fit_arrays, forward_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Sample:
    context: np.ndarray
    action: np.ndarray
    target: float

    def __post_init__(self):
        object.__setattr__(self, "context", np.asarray(self.context, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "action", np.asarray(self.action, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "target", float(self.target))

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.context, self.action])


def samples_to_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise ShapeError("Cannot fit a Predictor on an empty dataset.")
    widths = {(s.context.size, s.action.size) for s in samples}
    if len(widths) != 1:
        raise ShapeError(f"Samples mix context/action widths {sorted(widths)}.")
    X = np.array([s.features for s in samples])
    y = np.array([s.target for s in samples])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ShapeError("Samples must be finite.")
    return X, y


# -------- target scaling --------

@dataclass(frozen=True)
class TargetScale:
    offset: float = 0.0
    scale: float = 1.0

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.offset) / self.scale

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.scale + self.offset


def q_bound(max_steps: int, gamma: float, step_reward: float = 1.0, terminal_bonus: float = 0.0) -> float:
    """
    Largest |Q| any episode of at most ``max_steps`` steps can produce, with
    ``step_reward`` on every step and the last one replaced by +/-terminal_bonus
    (or left as ``step_reward`` when the bonus is 0).
    """
    finals = (terminal_bonus, -terminal_bonus) if terminal_bonus else (step_reward,)
    best = 0.0
    prefix = 0.0    # sum of gamma^j * step_reward for j < k
    discount = 1.0  # gamma^k
    for _ in range(max_steps):
        for final in finals:
            best = max(best, abs(prefix + discount * final))
        prefix += discount * step_reward
        discount *= gamma
    return best


def scale_targets(
    raw_targets,
    method: str = TargetScaling.BOUND,
    bound: float | None = None,
) -> tuple[np.ndarray, TargetScale]:
    raw = np.asarray(raw_targets, dtype=np.float64).reshape(-1)
    if raw.size == 0:
        raise ShapeError("Cannot scale an empty target list.")
    if method == TargetScaling.BOUND:
        limit = float(bound) if bound is not None else float(np.max(np.abs(raw)))
        scaling = TargetScale(0.0, limit) if limit > 0 else TargetScale()
    elif method == TargetScaling.STANDARDIZE:
        mean, std = float(np.mean(raw)), float(np.std(raw))
        scaling = TargetScale(mean, std) if std > 0 else TargetScale(mean, 1.0)
    elif method == TargetScaling.NONE:
        scaling = TargetScale()
    else:
        raise ConfigError(f"Unknown target scaling {method!r}.")
    return scaling.apply(raw), scaling


# -------- configs --------

@dataclass(frozen=True)
class MlpConfig:
    hidden_sizes: tuple[int, ...] = (64, 64)
    output_activation: str = Activation.TANH
    epochs: int = 1000
    batch_size: int = 256
    learning_rate: float = 0.001
    target_scaling: str = TargetScaling.BOUND
    target_bound: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 100
    bootstrap: bool = True
    min_samples_leaf: int = 1
    max_depth: int | None = None
    feature_subsample: float = 1.0
    target_scaling: str = TargetScaling.NONE
    target_bound: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ConfigError("n_estimators must be at least 1.")
        if self.min_samples_leaf < 1:
            raise ConfigError("min_samples_leaf must be at least 1.")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError("max_depth must be positive when set.")
        if not 0 < self.feature_subsample <= 1:
            raise ConfigError("feature_subsample must lie in (0, 1].")


# -------- models --------

class PredictorModel:
    """A fitted, immutable surrogate. ``predict_batch`` answers in target units."""
    kind: str = ""

    def __init__(self, input_dim: int, target_scale: TargetScale):
        self.input_dim = input_dim
        self.target_scale = target_scale

    def _check(self, inputs) -> np.ndarray:
        X = np.asarray(inputs, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"Predictor expects inputs of width {self.input_dim}, got shape {X.shape}.")
        return X

    def predict_batch(self, inputs) -> np.ndarray:
        X = self._check(inputs)
        return self.target_scale.invert(self._predict_scaled(X))

    def _predict_scaled(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state(self) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
        """(JSON-able metadata, named arrays) for the run archive."""
        raise NotImplementedError


class MlpPredictor(PredictorModel):
    kind = PredictorKind.MLP

    def __init__(self, genome: NetworkGenome, target_scale: TargetScale):
        super().__init__(genome.input_size, target_scale)
        self.genome = genome

    def _predict_scaled(self, X):
        return forward_batch(self.genome, X)[:, 0]

    def state(self):
        meta = {
            "kind": str(self.kind),
            "input_dim": self.input_dim,
            "offset": self.target_scale.offset,
            "scale": self.target_scale.scale,
            "layer_sizes": list(self.genome.layer_sizes),
            "hidden_activation": str(self.genome.hidden_activation),
            "output_activation": str(self.genome.output_activation),
        }
        return meta, {"weights": self.genome.weights, "biases": self.genome.biases}

    @classmethod
    def from_state(cls, meta, arrays) -> "MlpPredictor":
        genome = NetworkGenome(
            tuple(meta["layer_sizes"]), arrays["weights"], arrays["biases"],
            meta["hidden_activation"], meta["output_activation"],
        )
        return cls(genome, TargetScale(meta["offset"], meta["scale"]))


@dataclass(eq=False)
class RegressionTree:
    """CART regression tree stored as parallel node arrays; leaves have feature -1."""
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    threshold: np.ndarray = field(default_factory=lambda: np.zeros(0))
    left: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    right: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    value: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def node_count(self) -> int:
        return int(self.feature.size)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = np.flatnonzero(f >= 0)
            if inner.size == 0:
                return self.value[node]
            at = node[inner]
            go_left = X[inner, f[inner]] <= self.threshold[at]
            node[inner] = np.where(go_left, self.left[at], self.right[at])


def _best_split(X, y, idx, features, min_leaf):
    """(feature, threshold) minimising the summed child squared error, or None."""
    m = idx.size
    best_cost, best = np.inf, None
    y_node = y[idx]
    for f in features:
        x = X[idx, f]
        order = np.argsort(x, kind="stable")
        xs, ys = x[order], y_node[order]
        csum, csq = np.cumsum(ys), np.cumsum(ys * ys)
        n_left = np.arange(min_leaf, m - min_leaf + 1)
        if n_left.size == 0:
            continue
        # only cut between distinct values
        n_left = n_left[xs[n_left - 1] < xs[np.minimum(n_left, m - 1)]]
        if n_left.size == 0:
            continue
        sum_l, sq_l = csum[n_left - 1], csq[n_left - 1]
        sum_r, sq_r = csum[-1] - sum_l, csq[-1] - sq_l
        n_right = m - n_left
        cost = (sq_l - sum_l ** 2 / n_left) + (sq_r - sum_r ** 2 / n_right)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            lo, hi = xs[n_left[k] - 1], xs[n_left[k]]
            threshold = (lo + hi) / 2.0
            if not lo <= threshold < hi:
                threshold = lo
            best_cost, best = cost[k], (int(f), float(threshold))
    return best


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    min_samples_leaf: int = 1,
    max_depth: int | None = None,
    feature_subsample: float = 1.0,
) -> RegressionTree:
    n_features = X.shape[1]
    n_try = max(1, int(round(feature_subsample * n_features)))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for col in (feature, left, right):
            col.append(-1)
        threshold.append(0.0)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        y_node = y[idx]
        if np.all(y_node == y_node[0]):
            value[node] = float(y_node[0])
            continue
        value[node] = float(np.mean(y_node))
        if idx.size < 2 * min_samples_leaf or (max_depth is not None and depth >= max_depth):
            continue
        features = range(n_features) if n_try >= n_features else np.sort(rng.choice(n_features, n_try, replace=False))
        split = _best_split(X, y, idx, features, min_samples_leaf)
        if split is None:
            continue
        f, t = split
        goes_left = X[idx, f] <= t
        feature[node], threshold[node] = f, t
        left[node], right[node] = new_node(), new_node()
        stack.append((right[node], idx[~goes_left], depth + 1))
        stack.append((left[node], idx[goes_left], depth + 1))

    return RegressionTree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value),
    )


class ForestPredictor(PredictorModel):
    kind = PredictorKind.RANDOM_FOREST

    def __init__(self, trees: list[RegressionTree], input_dim: int, target_scale: TargetScale):
        super().__init__(input_dim, target_scale)
        self.trees = trees

    def tree_predictions(self, inputs) -> np.ndarray:
        X = self._check(inputs)
        return np.stack([self.target_scale.invert(t.predict(X)) for t in self.trees])

    def _predict_scaled(self, X):
        return np.mean(np.stack([t.predict(X) for t in self.trees]), axis=0)

    def state(self):
        meta = {
            "kind": str(self.kind),
            "input_dim": self.input_dim,
            "offset": self.target_scale.offset,
            "scale": self.target_scale.scale,
            "n_trees": len(self.trees),
        }
        arrays = {}
        for i, tree in enumerate(self.trees):
            for col in ("feature", "threshold", "left", "right", "value"):
                arrays[f"tree{i:04d}.{col}"] = getattr(tree, col)
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays) -> "ForestPredictor":
        trees = [
            RegressionTree(**{col: arrays[f"tree{i:04d}.{col}"] for col in ("feature", "threshold", "left", "right", "value")})
            for i in range(meta["n_trees"])
        ]
        return cls(trees, meta["input_dim"], TargetScale(meta["offset"], meta["scale"]))


def predictor_from_state(meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> PredictorModel:
    if meta.get("kind") == PredictorKind.MLP:
        return MlpPredictor.from_state(meta, arrays)
    if meta.get("kind") == PredictorKind.RANDOM_FOREST:
        return ForestPredictor.from_state(meta, arrays)
    raise ConfigError(f"Unknown predictor kind {meta.get('kind')!r}.")


# -------- operations --------

def fit_predictor(
    samples: Sequence[Sample],
    kind: str,
    config: MlpConfig | ForestConfig,
    workers: int = 1,
) -> PredictorModel:
    X, raw = samples_to_arrays(samples)
    y, scaling = scale_targets(raw, config.target_scaling, config.target_bound)

    if kind == PredictorKind.MLP:
        if not isinstance(config, MlpConfig):
            raise ConfigError("MLP predictors need an MlpConfig.")
        arch = Architecture((X.shape[1], *config.hidden_sizes, 1), Activation.TANH, config.output_activation)
        train = TrainConfig(
            epochs=config.epochs, batch_size=config.batch_size,
            learning_rate=config.learning_rate, seed=config.seed,
        )
        genome = fit_arrays(X, y, arch, train)
        return MlpPredictor(genome, scaling)

    if kind == PredictorKind.RANDOM_FOREST:
        if not isinstance(config, ForestConfig):
            raise ConfigError("Random-forest predictors need a ForestConfig.")
        seeds = np.random.SeedSequence(config.seed).spawn(config.n_estimators)

        def grow(seed):
            rng = np.random.default_rng(seed)
            rows = rng.integers(0, X.shape[0], X.shape[0]) if config.bootstrap else np.arange(X.shape[0])
            return fit_tree(X[rows], y[rows], rng, config.min_samples_leaf, config.max_depth, config.feature_subsample)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                trees = list(pool.map(grow, seeds))
        else:
            trees = [grow(s) for s in seeds]
        logger.debug("Fitted %d trees on %d samples", len(trees), X.shape[0])
        return ForestPredictor(trees, X.shape[1], scaling)

    raise ConfigError(f"Unknown predictor kind {kind!r}.")


def predict(model: PredictorModel, context, action) -> float:
    features = np.concatenate([
        np.asarray(context, dtype=np.float64).reshape(-1),
        np.asarray(action, dtype=np.float64).reshape(-1),
    ])
    if features.size != model.input_dim:
        raise ShapeError(f"Predictor expects {model.input_dim} inputs, got {features.size}.")
    return float(model.predict_batch(features[None, :])[0])
