import math

import numpy as np
from django.test import SimpleTestCase

from .choices import Activation
from .exceptions import (
    DivergedTrainingError,
    InvalidArchitectureError,
    NonDifferentiableError,
    NumericError,
    ShapeError,
)
from .neuralnet import (
    Architecture,
    NetworkGenome,
    TrainConfig,
    fit_arrays,
    forward,
    forward_batch,
    gradients,
    init_network,
    mse,
    train_mlp,
)


def _loop_forward(genome: NetworkGenome, x):
    """Plain-Python evaluation of the same network, used as an oracle."""
    values = [float(v) for v in x]
    layers = genome.layers()
    for i, (W, b) in enumerate(layers):
        out = []
        for row in range(W.shape[0]):
            total = float(b[row])
            for col in range(W.shape[1]):
                total += float(W[row, col]) * values[col]
            last = i == len(layers) - 1
            if not last or genome.output_activation == Activation.TANH:
                total = math.tanh(total)
            out.append(total)
        values = out
    return values


class InitNetworkTests(SimpleTestCase):

    def test_wide_layer_has_orthonormal_rows(self):
        """A wide layer starts with orthonormal rows."""
        g = init_network([4, 3], seed=11)
        W, b = g.layers()[0]
        self.assertEqual(W.shape, (3, 4))
        np.testing.assert_allclose(W @ W.T, np.eye(3), atol=1e-9)
        self.assertTrue(np.all(b == 0))

    def test_tall_layer_has_orthonormal_columns(self):
        """A tall layer starts with orthonormal columns."""
        W, _ = init_network([3, 5], seed=2).layers()[0]
        np.testing.assert_allclose(W.T @ W, np.eye(3), atol=1e-9)

    def test_single_weight_is_plus_or_minus_one(self):
        """A 1x1 orthogonal matrix is +1 or -1."""
        for seed in range(5):
            g = init_network([1, 1], seed=seed)
            self.assertAlmostEqual(abs(float(g.weights[0])), 1.0, places=12)

    def test_zero_input_gives_zero_tanh_output(self):
        """With zero biases a zero input maps to zero."""
        g = init_network([3, 6, 2], seed=4)
        np.testing.assert_array_equal(forward(g, np.zeros(3)), np.zeros(2))

    def test_deterministic_for_seed(self):
        """The same seed gives the same network and another seed does not."""
        a = init_network([2, 8, 1], seed=9)
        b = init_network([2, 8, 1], seed=9)
        c = init_network([2, 8, 1], seed=10)
        self.assertTrue(a.same_as(b))
        self.assertFalse(a.same_as(c))

    def test_invalid_layer_sizes(self):
        """Layer lists that are too short or hold non-positive sizes are rejected."""
        for sizes in ([], [3], [3, 0], [2, -1, 1]):
            with self.assertRaises(InvalidArchitectureError):
                init_network(sizes)

    def test_parameter_counts(self):
        """Weight and bias counts follow the layer sizes."""
        g = init_network([4, 32, 2], seed=0)
        self.assertEqual(g.weights.size, 4 * 32 + 32 * 2)
        self.assertEqual(g.biases.size, 32 + 2)
        self.assertEqual(g.parameter_count, g.weights.size + g.biases.size)


class ForwardTests(SimpleTestCase):

    def test_zero_parameters_give_zero_output(self):
        """A network of zeros outputs zeros."""
        g = NetworkGenome((3, 4, 2), np.zeros(20), np.zeros(6))
        np.testing.assert_array_equal(forward(g, [0.3, -2.0, 5.0]), np.zeros(2))

    def test_identity_linear_layer(self):
        """An identity weight matrix passes inputs through."""
        g = NetworkGenome((3, 3), np.eye(3).reshape(-1), np.zeros(3), output_activation=Activation.LINEAR)
        np.testing.assert_array_equal(forward(g, [1.5, -2.0, 0.25]), [1.5, -2.0, 0.25])

    def test_matches_loop_oracle(self):
        """Vectorised evaluation matches a plain loop."""
        rng = np.random.default_rng(123)
        for activation in (Activation.TANH, Activation.LINEAR):
            g = NetworkGenome((2, 4, 1), rng.normal(size=12), rng.normal(size=5), output_activation=activation)
            got = forward(g, [0.5, -0.5])
            np.testing.assert_allclose(got, _loop_forward(g, [0.5, -0.5]), rtol=0, atol=1e-12)

    def test_batch_matches_single(self):
        """Batched and single evaluation agree."""
        g = init_network([3, 5, 2], seed=1)
        X = np.random.default_rng(0).normal(size=(7, 3))
        batch = forward_batch(g, X)
        for row, x in zip(batch, X):
            np.testing.assert_allclose(row, forward(g, x), atol=1e-12)

    def test_argmax_ties_pick_lowest_index(self):
        """Argmax ties go to the lowest index."""
        g = NetworkGenome((2, 3), np.zeros(6), [1.0, 1.0, 0.0], output_activation=Activation.ARGMAX)
        np.testing.assert_array_equal(forward(g, [0.1, 0.2]), [1.0, 0.0, 0.0])

    def test_argmax_output_is_one_hot(self):
        """Argmax networks emit one-hot vectors."""
        g = init_network([4, 6, 3], output_activation=Activation.ARGMAX, seed=5)
        out = forward_batch(g, np.random.default_rng(1).normal(size=(20, 4)))
        np.testing.assert_array_equal(out.sum(axis=1), np.ones(20))

    def test_dimension_mismatch(self):
        """Inputs of the wrong width are rejected."""
        g = init_network([3, 2], seed=0)
        with self.assertRaises(ShapeError):
            forward(g, [1.0, 2.0])

    def test_non_finite_input(self):
        """NaN or infinite inputs are rejected."""
        g = init_network([2, 2], seed=0)
        with self.assertRaises(NumericError):
            forward(g, [1.0, float("nan")])

    def test_non_finite_parameters_rejected(self):
        """A genome cannot hold NaN parameters."""
        with self.assertRaises(NumericError):
            NetworkGenome((1, 1), [float("inf")], [0.0])

    def test_dict_round_trip_keeps_fingerprint(self):
        """Serialising a genome keeps its fingerprint."""
        g = init_network([3, 4, 2], output_activation=Activation.ARGMAX, seed=3)
        again = NetworkGenome.from_dict(g.to_dict())
        self.assertEqual(g.fingerprint(), again.fingerprint())


class GradientTests(SimpleTestCase):

    def _numeric(self, genome, X, T, h=1e-5):
        theta = genome.parameters
        grad = np.zeros_like(theta)
        for i in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            grad[i] = (mse(genome.with_parameters(up), X, T) - mse(genome.with_parameters(down), X, T)) / (2 * h)
        return grad

    def test_matches_central_differences(self):
        """Analytic gradients match central finite differences."""
        rng = np.random.default_rng(2024)
        for trial in range(20):
            sizes = [int(rng.integers(1, 5))]
            sizes += [int(rng.integers(1, 9)) for _ in range(int(rng.integers(1, 3)))]
            sizes.append(int(rng.integers(1, 4)))
            activation = (Activation.TANH, Activation.LINEAR)[trial % 2]
            g = init_network(sizes, output_activation=activation, seed=trial)
            g = g.with_parameters(g.parameters + rng.normal(scale=0.1, size=g.parameter_count))
            X = rng.normal(size=(16, sizes[0]))
            T = rng.normal(scale=0.5, size=(16, sizes[-1]))

            analytic = gradients(g, list(zip(X, T)))
            numeric = self._numeric(g, X, T)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            self.assertLess(float(np.max(np.abs(analytic - numeric) / denom)), 1e-4, sizes)

    def test_zero_error_gives_zero_gradient(self):
        """A perfect fit has zero gradient."""
        g = init_network([2, 8, 1], seed=3)
        X = np.random.default_rng(3).normal(size=(16, 2))
        T = forward_batch(g, X)
        np.testing.assert_allclose(gradients(g, list(zip(X, T))), 0.0, atol=1e-15)

    def test_single_linear_unit_by_hand(self):
        """Gradient of one linear unit, worked by hand."""
        g = NetworkGenome((1, 1), [1.0], [0.0], output_activation=Activation.LINEAR)
        # loss (w*x + b - t)^2 at w=1, b=0, x=1, t=0
        np.testing.assert_allclose(gradients(g, [([1.0], [0.0])]), [2.0, 2.0])

    def test_argmax_is_not_differentiable(self):
        """Argmax networks have no gradient."""
        g = init_network([2, 3], output_activation=Activation.ARGMAX, seed=0)
        with self.assertRaises(NonDifferentiableError):
            gradients(g, [([0.0, 0.0], [1.0, 0.0, 0.0])])

    def test_empty_batch(self):
        """An empty gradient batch is rejected."""
        with self.assertRaises(ShapeError):
            gradients(init_network([1, 1], seed=0), [])


class TrainMlpTests(SimpleTestCase):

    def setUp(self):
        rng = np.random.default_rng(7)
        self.X = rng.uniform(-1, 1, size=(64, 2))
        self.dataset = [(x, [0.5 * x[0] - 0.25 * x[1]]) for x in self.X]
        self.arch = Architecture((2, 8, 1), Activation.TANH, Activation.LINEAR)

    def test_loss_goes_down(self):
        """Training cuts the loss by an order of magnitude."""
        history = []
        train_mlp(self.dataset, self.arch, TrainConfig(epochs=200, batch_size=16, learning_rate=0.01), history)
        self.assertEqual(len(history), 200)
        self.assertLess(history[-1], 0.1 * history[0])

    def test_same_seed_same_network(self):
        """Training with one seed is deterministic."""
        cfg = TrainConfig(epochs=5, batch_size=10, seed=4)
        a = train_mlp(self.dataset, self.arch, cfg)
        b = train_mlp(self.dataset, self.arch, cfg)
        self.assertTrue(a.same_as(b))

    def test_batch_larger_than_dataset(self):
        """A batch larger than the data is one full batch."""
        g = train_mlp(self.dataset[:5], self.arch, TrainConfig(epochs=3, batch_size=256))
        self.assertEqual(g.layer_sizes, (2, 8, 1))

    def test_divergence_reports_epoch(self):
        """A diverging fit reports the epoch it blew up in."""
        cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=float("inf"))
        with np.errstate(all="ignore"), self.assertRaises(DivergedTrainingError) as ctx:
            train_mlp(self.dataset, self.arch, cfg)
        self.assertEqual(ctx.exception.epoch, 0)

    def test_argmax_architecture_rejected(self):
        """Argmax networks cannot be trained."""
        arch = Architecture((2, 3), Activation.TANH, Activation.ARGMAX)
        with self.assertRaises(NonDifferentiableError):
            train_mlp([([0.0, 0.0], [1.0, 0.0, 0.0])], arch, TrainConfig(epochs=1, batch_size=1))

    def test_empty_dataset(self):
        """Training on nothing is an error."""
        with self.assertRaises(ShapeError):
            train_mlp([], self.arch, TrainConfig(epochs=1, batch_size=1))

    def test_matches_step_by_step_adam(self):
        """Flat-array training reproduces a plain Adam loop over rebuilt genomes."""
        cfg = TrainConfig(epochs=4, batch_size=10, learning_rate=0.01, seed=9)
        fitted = train_mlp(self.dataset, self.arch, cfg)

        init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        genome = init_network(self.arch.layer_sizes, self.arch.hidden_activation, self.arch.output_activation, init_seq)
        rng = np.random.default_rng(shuffle_seq)
        m = np.zeros(genome.parameter_count)
        v = np.zeros(genome.parameter_count)
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(len(self.dataset))
            for start in range(0, len(order), cfg.batch_size):
                grad = gradients(genome, [self.dataset[i] for i in order[start:start + cfg.batch_size]])
                step += 1
                m = 0.9 * m + (1.0 - 0.9) * grad
                v = 0.999 * v + (1.0 - 0.999) * grad ** 2
                m_hat = m / (1.0 - 0.9 ** step)
                v_hat = v / (1.0 - 0.999 ** step)
                genome = genome.with_parameters(genome.parameters - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8))
        np.testing.assert_allclose(fitted.parameters, genome.parameters, rtol=1e-10, atol=1e-12)

    def test_full_batch_loss_never_increases(self):
        """With the whole dataset in one batch and a small step, every epoch improves."""
        history = []
        train_mlp(self.dataset, self.arch, TrainConfig(epochs=60, batch_size=64, learning_rate=5e-4), history)
        self.assertTrue(all(b <= a for a, b in zip(history, history[1:])), history)
        self.assertLess(history[-1], history[0])


class FitExamplesTests(SimpleTestCase):
    """Small regression problems with known attainable error."""

    def test_constant_target(self):
        """A constant target is learned almost exactly."""
        X = np.linspace(-1.0, 1.0, 50)[:, None]
        T = np.full((50, 1), 0.5)
        g = fit_arrays(X, T, Architecture((1, 8, 1), Activation.TANH, Activation.LINEAR),
                       TrainConfig(epochs=500, batch_size=10, learning_rate=0.01))
        self.assertLess(mse(g, X, T), 1e-4)

    def test_linear_target(self):
        """y = 2x is fitted by a linear network."""
        X = np.linspace(-1.0, 1.0, 100)[:, None]
        T = 2.0 * X
        g = fit_arrays(X, T, Architecture((1, 1), Activation.TANH, Activation.LINEAR),
                       TrainConfig(epochs=2000, batch_size=20, learning_rate=0.01))
        self.assertLess(mse(g, X, T), 1e-3)

    def test_sine_with_two_hidden_layers(self):
        """sin(x) on [-pi, pi] with a 1-64-64-1 network, loss trending down."""
        X = np.linspace(-math.pi, math.pi, 200)[:, None]
        T = np.sin(X)
        history = []
        g = fit_arrays(X, T, Architecture((1, 64, 64, 1), Activation.TANH, Activation.LINEAR),
                       TrainConfig(epochs=2000, batch_size=32), history)
        self.assertLess(mse(g, X, T), 1e-2)
        self.assertLessEqual(np.mean(history[-200:]), np.mean(history[:200]))
