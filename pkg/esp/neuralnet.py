"""
Fixed-graph feed-forward networks: representation, forward pass, backprop and
Adam training. Evolved Prescriptors and gradient-trained Predictors share the
same ``NetworkGenome`` representation.

Parameter order everywhere is: all weights (layer-major, each matrix stored
``(out, in)`` row-major) followed by all biases (layer-major).
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .choices import Activation
from .exceptions import (
    DivergedTrainingError,
    InvalidArchitectureError,
    NonDifferentiableError,
    NumericError,
    ShapeError,
)

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = (Activation.TANH,)
OUTPUT_ACTIVATIONS = (Activation.TANH, Activation.LINEAR, Activation.ARGMAX)


def _check_layer_sizes(layer_sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(layer_sizes or ())
    if len(sizes) < 2:
        raise InvalidArchitectureError("A network needs at least an input and an output layer.")
    for s in sizes:
        if isinstance(s, bool) or int(s) != s or s < 1:
            raise InvalidArchitectureError(f"Layer sizes must be positive integers, got {list(sizes)}.")
    return tuple(int(s) for s in sizes)


def weight_count(layer_sizes: Sequence[int]) -> int:
    return sum(a * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def bias_count(layer_sizes: Sequence[int]) -> int:
    return sum(layer_sizes[1:])


@dataclass(frozen=True)
class Architecture:
    layer_sizes: tuple[int, ...]
    hidden_activation: str = Activation.TANH
    output_activation: str = Activation.TANH

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", _check_layer_sizes(self.layer_sizes))
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise InvalidArchitectureError(f"Unsupported hidden activation {self.hidden_activation!r}.")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidArchitectureError(f"Unsupported output activation {self.output_activation!r}.")


@dataclass(frozen=True, eq=False)
class NetworkGenome:
    """Flat parameter set plus the layer-shape metadata needed to evaluate it."""
    layer_sizes: tuple[int, ...]
    weights: np.ndarray
    biases: np.ndarray
    hidden_activation: str = Activation.TANH
    output_activation: str = Activation.TANH
    _layers: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        arch = Architecture(self.layer_sizes, self.hidden_activation, self.output_activation)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        biases = np.array(self.biases, dtype=np.float64).reshape(-1)
        if weights.size != weight_count(arch.layer_sizes):
            raise InvalidArchitectureError(
                f"Expected {weight_count(arch.layer_sizes)} weights for {list(arch.layer_sizes)}, got {weights.size}."
            )
        if biases.size != bias_count(arch.layer_sizes):
            raise InvalidArchitectureError(
                f"Expected {bias_count(arch.layer_sizes)} biases for {list(arch.layer_sizes)}, got {biases.size}."
            )
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(biases))):
            raise NumericError("Network parameters must be finite.")
        weights.setflags(write=False)
        biases.setflags(write=False)
        object.__setattr__(self, "layer_sizes", arch.layer_sizes)
        object.__setattr__(self, "hidden_activation", Activation(arch.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(arch.output_activation))
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "_layers", _unpack(arch.layer_sizes, weights, biases))

    @property
    def architecture(self) -> Architecture:
        return Architecture(self.layer_sizes, self.hidden_activation, self.output_activation)

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def parameters(self) -> np.ndarray:
        return np.concatenate([self.weights, self.biases])

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.biases.size

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) pairs; W has shape (out, in)."""
        return self._layers

    def with_parameters(self, parameters: np.ndarray) -> "NetworkGenome":
        parameters = np.asarray(parameters, dtype=np.float64).reshape(-1)
        n_w = self.weights.size
        return NetworkGenome(
            self.layer_sizes, parameters[:n_w], parameters[n_w:],
            self.hidden_activation, self.output_activation,
        )

    def same_as(self, other: "NetworkGenome") -> bool:
        return (
            self.architecture == other.architecture
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
        )

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(repr(self.architecture).encode())
        h.update(self.weights.tobytes())
        h.update(self.biases.tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": str(self.hidden_activation),
            "output_activation": str(self.output_activation),
            "weights": [float(w) for w in self.weights],
            "biases": [float(b) for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkGenome":
        return cls(
            tuple(data["layer_sizes"]),
            np.array(data["weights"], dtype=np.float64),
            np.array(data["biases"], dtype=np.float64),
            data.get("hidden_activation", Activation.TANH),
            data.get("output_activation", Activation.TANH),
        )


def _unpack(layer_sizes, weights, biases) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    w_at = b_at = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        W = weights[w_at:w_at + n_in * n_out].reshape(n_out, n_in)
        b = biases[b_at:b_at + n_out]
        layers.append((W, b))
        w_at += n_in * n_out
        b_at += n_out
    return layers


def _orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """(Semi-)orthogonal matrix from a sign-corrected QR of a standard-normal draw."""
    transpose = rows <= cols
    big, small = (cols, rows) if transpose else (rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    return q.T if transpose else q


def init_network(
    layer_sizes: Sequence[int],
    hidden_activation: str = Activation.TANH,
    output_activation: str = Activation.TANH,
    seed: int | np.random.SeedSequence = 0,
) -> NetworkGenome:
    arch = Architecture(tuple(layer_sizes or ()), hidden_activation, output_activation)
    rng = np.random.default_rng(seed)
    weights = [
        _orthogonal(n_out, n_in, rng).reshape(-1)
        for n_in, n_out in zip(arch.layer_sizes[:-1], arch.layer_sizes[1:])
    ]
    return NetworkGenome(
        arch.layer_sizes,
        np.concatenate(weights),
        np.zeros(bias_count(arch.layer_sizes)),
        arch.hidden_activation,
        arch.output_activation,
    )


def _activations(layers, output_activation, X: np.ndarray) -> list[np.ndarray]:
    """Every layer's output for a batch; the last entry is the pre-argmax output."""
    outs = [X]
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = outs[-1] @ W.T + b
        if i < last or output_activation == Activation.TANH:
            z = np.tanh(z)
        outs.append(z)
    return outs


def _one_hot_argmax(Z: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: lowest index wins ties
    out = np.zeros_like(Z)
    out[np.arange(Z.shape[0]), np.argmax(Z, axis=1)] = 1.0
    return out


def forward_batch(genome: NetworkGenome, inputs: np.ndarray) -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != genome.input_size:
        raise ShapeError(f"Expected inputs of shape (n, {genome.input_size}), got {X.shape}.")
    if not np.all(np.isfinite(X)):
        raise NumericError("Network input contains non-finite values.")
    out = _activations(genome.layers(), genome.output_activation, X)[-1]
    if genome.output_activation == Activation.ARGMAX:
        return _one_hot_argmax(out)
    return out


def forward(genome: NetworkGenome, inputs: Sequence[float] | np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape != (genome.input_size,):
        raise ShapeError(f"Expected an input vector of length {genome.input_size}, got shape {x.shape}.")
    return forward_batch(genome, x[None, :])[0]


def _loss_and_gradient(layers, output_activation, X: np.ndarray, T: np.ndarray) -> tuple[float, np.ndarray]:
    outs = _activations(layers, output_activation, X)
    Y = outs[-1]
    err = Y - T
    loss = float(np.mean(err ** 2))
    delta = 2.0 * err / err.size
    if output_activation == Activation.TANH:
        delta = delta * (1.0 - Y ** 2)

    w_grads: list[np.ndarray] = [None] * len(layers)
    b_grads: list[np.ndarray] = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        A_prev = outs[i]
        w_grads[i] = (delta.T @ A_prev).reshape(-1)
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W) * (1.0 - A_prev ** 2)
    return loss, np.concatenate(w_grads + b_grads)


def _as_batch(genome: NetworkGenome, batch) -> tuple[np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise ShapeError("Gradient batch must not be empty.")
    X = np.array([np.asarray(x, dtype=np.float64).reshape(-1) for x, _ in batch])
    T = np.array([np.asarray(t, dtype=np.float64).reshape(-1) for _, t in batch])
    if X.shape[1] != genome.input_size:
        raise ShapeError(f"Inputs have width {X.shape[1]}, network expects {genome.input_size}.")
    if T.shape[1] != genome.output_size:
        raise ShapeError(f"Targets have width {T.shape[1]}, network emits {genome.output_size}.")
    return X, T


def gradients(genome: NetworkGenome, batch: Sequence[tuple[Any, Any]]) -> np.ndarray:
    """d(mean squared error over the batch)/d(parameters), in genome parameter order."""
    if genome.output_activation == Activation.ARGMAX:
        raise NonDifferentiableError("Argmax output networks have no gradient.")
    X, T = _as_batch(genome, batch)
    return _loss_and_gradient(genome.layers(), genome.output_activation, X, T)[1]


def mse(genome: NetworkGenome, inputs: np.ndarray, targets: np.ndarray) -> float:
    Y = forward_batch(genome, inputs)
    T = np.asarray(targets, dtype=np.float64).reshape(Y.shape)
    return float(np.mean((Y - T) ** 2))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArchitectureError("epochs and batch_size must be positive.")
        if not self.learning_rate > 0:
            raise InvalidArchitectureError("learning_rate must be > 0.")


def fit_arrays(
    inputs: np.ndarray,
    targets: np.ndarray,
    architecture: Architecture,
    config: TrainConfig,
    history: list[float] | None = None,
) -> NetworkGenome:
    """Shuffled mini-batch Adam on MSE for exactly ``config.epochs`` passes."""
    X = np.asarray(inputs, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError("Training inputs must be a non-empty 2-d array.")
    if T.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs but {T.shape[0]} targets.")
    if architecture.output_activation == Activation.ARGMAX:
        raise NonDifferentiableError("Argmax output networks cannot be trained by gradient descent.")
    if X.shape[1] != architecture.layer_sizes[0] or T.shape[1] != architecture.layer_sizes[-1]:
        raise ShapeError(
            f"Data of widths ({X.shape[1]}, {T.shape[1]}) does not fit architecture {list(architecture.layer_sizes)}."
        )

    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    genome = init_network(
        architecture.layer_sizes, architecture.hidden_activation, architecture.output_activation, init_seq
    )
    rng = np.random.default_rng(shuffle_seq)
    theta = genome.parameters.copy()
    n_w = genome.weights.size
    # (W, b) views into theta, kept current by the in-place updates below
    layers = _unpack(genome.layer_sizes, theta[:n_w], theta[n_w:])
    output_activation = genome.output_activation
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    n = X.shape[0]
    step = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grad = _loss_and_gradient(layers, output_activation, X[idx], T[idx])
            except FloatingPointError as exc:
                raise DivergedTrainingError(epoch) from exc
            step += 1
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad ** 2
            m_hat = m / (1.0 - b1 ** step)
            v_hat = v / (1.0 - b2 ** step)
            theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
            epoch_loss += loss * idx.size
            if not np.all(np.isfinite(theta)):
                raise DivergedTrainingError(epoch)
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise DivergedTrainingError(epoch)
        if history is not None:
            history.append(epoch_loss)

    logger.debug("Trained %s for %d epochs, final loss %.6g", list(architecture.layer_sizes), config.epochs, epoch_loss)
    return genome.with_parameters(theta)


def train_mlp(
    dataset: Sequence[tuple[Any, Any]],
    architecture: Architecture,
    config: TrainConfig,
    history: list[float] | None = None,
) -> NetworkGenome:
    if len(dataset) == 0:
        raise ShapeError("Cannot train on an empty dataset.")
    X = np.array([np.asarray(x, dtype=np.float64).reshape(-1) for x, _ in dataset])
    T = np.array([np.asarray(t, dtype=np.float64).reshape(-1) for _, t in dataset])
    return fit_arrays(X, T, architecture, config, history)
