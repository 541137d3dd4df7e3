import numpy as np
from django.test import SimpleTestCase

from .archive import decode_predictor, encode_predictor
from .choices import Activation, PredictorKind, TargetScaling
from .exceptions import ConfigError, ShapeError
from .neuralnet import NetworkGenome
from .predictors import (
    ForestConfig,
    MlpConfig,
    MlpPredictor,
    Sample,
    TargetScale,
    fit_predictor,
    fit_tree,
    predict,
    q_bound,
    samples_to_arrays,
    scale_targets,
)


def linear_samples(n=200, seed=0):
    rng = np.random.default_rng(seed)
    contexts = rng.uniform(-1, 1, size=(n, 2))
    actions = rng.uniform(-1, 1, size=(n, 1))
    targets = 2.0 * contexts[:, 0] - contexts[:, 1] + 0.5 * actions[:, 0]
    return [Sample(c, a, t) for c, a, t in zip(contexts, actions, targets)]


class ScalingTests(SimpleTestCase):

    def test_cartpole_bound_is_the_terminal_bonus(self):
        """With a large bonus the cart-pole bound is the bonus."""
        self.assertAlmostEqual(q_bound(200, 0.9, 1.0, 2000.0), 2000.0)

    def test_bound_without_bonus_is_the_geometric_sum(self):
        """Without a bonus the bound is the discounted reward sum."""
        self.assertAlmostEqual(q_bound(200, 0.9), (1 - 0.9 ** 200) / 0.1, places=9)
        self.assertAlmostEqual(q_bound(10, 1.0), 10.0)

    def test_bound_scaling(self):
        """Bound scaling divides by the bound and inverts exactly."""
        scaled, scale = scale_targets([1000.0, -2000.0, 4.0], TargetScaling.BOUND, 2000.0)
        np.testing.assert_allclose(scaled, [0.5, -1.0, 0.002])
        np.testing.assert_allclose(scale.invert(scaled), [1000.0, -2000.0, 4.0])

    def test_standardize(self):
        """Standardised targets have zero mean and unit spread."""
        scaled, scale = scale_targets([1.0, 2.0, 3.0], TargetScaling.STANDARDIZE)
        self.assertAlmostEqual(float(np.mean(scaled)), 0.0)
        self.assertAlmostEqual(float(np.std(scaled)), 1.0)
        np.testing.assert_allclose(scale.invert(scaled), [1.0, 2.0, 3.0])

    def test_standardize_constant_targets(self):
        """Constant targets standardise without dividing by zero."""
        scaled, scale = scale_targets([4.0, 4.0], TargetScaling.STANDARDIZE)
        np.testing.assert_array_equal(scaled, [0.0, 0.0])
        self.assertEqual(scale, TargetScale(4.0, 1.0))

    def test_none_is_identity(self):
        """No scaling leaves targets alone."""
        scaled, scale = scale_targets([3.0, -7.5], TargetScaling.NONE)
        np.testing.assert_array_equal(scaled, [3.0, -7.5])
        self.assertEqual(scale, TargetScale())

    def test_unknown_scaling(self):
        """An unknown scaling mode is rejected."""
        with self.assertRaises(ConfigError):
            scale_targets([1.0], "log")


class SampleTests(SimpleTestCase):

    def test_features_concatenate_context_and_action(self):
        """Predictor features are context then action."""
        s = Sample([1.0, 2.0], [0.0, 1.0], 3)
        np.testing.assert_array_equal(s.features, [1.0, 2.0, 0.0, 1.0])
        self.assertEqual(s.target, 3.0)

    def test_mixed_widths_rejected(self):
        """Samples of different widths cannot be stacked."""
        with self.assertRaises(ShapeError):
            samples_to_arrays([Sample([1.0], [0.0], 1.0), Sample([1.0, 2.0], [0.0], 1.0)])

    def test_empty_rejected(self):
        """Fitting on no samples is rejected."""
        with self.assertRaises(ShapeError):
            fit_predictor([], PredictorKind.RANDOM_FOREST, ForestConfig())


class TreeTests(SimpleTestCase):

    def test_unlimited_tree_interpolates_training_points(self):
        """A fully grown tree reproduces its training targets."""
        rng = np.random.default_rng(3)
        X = rng.uniform(-5, 5, size=(500, 3))
        y = rng.normal(size=500)
        tree = fit_tree(X, y, np.random.default_rng(0))
        np.testing.assert_array_equal(tree.predict(X), y)

    def test_depth_limit(self):
        """A depth-one tree has one split and two leaves."""
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(100, 2))
        tree = fit_tree(X, X[:, 0], rng, max_depth=1)
        self.assertEqual(tree.node_count, 3)

    def test_constant_target_is_a_single_leaf(self):
        """Constant targets give a single leaf."""
        X = np.random.default_rng(5).uniform(size=(50, 2))
        tree = fit_tree(X, np.full(50, 1.25), np.random.default_rng(0))
        self.assertEqual(tree.node_count, 1)
        np.testing.assert_array_equal(tree.predict(X), np.full(50, 1.25))

    def test_min_samples_leaf_stops_small_nodes(self):
        """Nodes smaller than min_samples_leaf are not split."""
        X = np.arange(6, dtype=float)[:, None]
        tree = fit_tree(X, np.arange(6, dtype=float), np.random.default_rng(0), min_samples_leaf=3)
        # only one split leaves three samples on each side
        self.assertEqual(tree.node_count, 3)
        np.testing.assert_allclose(tree.predict(X), [1, 1, 1, 4, 4, 4])


class ForestTests(SimpleTestCase):

    def setUp(self):
        self.samples = linear_samples()
        self.X, _ = samples_to_arrays(self.samples)

    def test_prediction_is_mean_of_trees(self):
        """A forest predicts the mean of its trees."""
        model = fit_predictor(self.samples, PredictorKind.RANDOM_FOREST, ForestConfig(n_estimators=12, seed=1))
        per_tree = model.tree_predictions(self.X)
        self.assertEqual(per_tree.shape, (12, len(self.samples)))
        np.testing.assert_allclose(model.predict_batch(self.X), per_tree.mean(axis=0), rtol=0, atol=1e-12)

    def test_worker_count_does_not_change_the_forest(self):
        """Fitting with more workers gives the same forest."""
        cfg = ForestConfig(n_estimators=8, seed=5)
        serial = fit_predictor(self.samples, PredictorKind.RANDOM_FOREST, cfg, workers=1)
        threaded = fit_predictor(self.samples, PredictorKind.RANDOM_FOREST, cfg, workers=4)
        np.testing.assert_array_equal(serial.predict_batch(self.X), threaded.predict_batch(self.X))

    def test_without_bootstrap_every_tree_interpolates(self):
        """Without bootstrap each tree fits every training point."""
        cfg = ForestConfig(n_estimators=3, bootstrap=False, seed=2)
        model = fit_predictor(self.samples, PredictorKind.RANDOM_FOREST, cfg)
        y = np.array([s.target for s in self.samples])
        np.testing.assert_allclose(model.predict_batch(self.X), y, atol=1e-12)

    def test_wrong_config_type(self):
        """A forest cannot be fitted from an MLP config."""
        with self.assertRaises(ConfigError):
            fit_predictor(self.samples, PredictorKind.RANDOM_FOREST, MlpConfig())

    def test_archive_codec_is_stable(self):
        """A decoded forest re-encodes to the same bytes and predicts the same."""
        model = fit_predictor(self.samples, PredictorKind.RANDOM_FOREST, ForestConfig(n_estimators=4, seed=9))
        blob = encode_predictor(model)
        again = decode_predictor(blob)
        self.assertEqual(encode_predictor(again), blob)
        np.testing.assert_array_equal(again.predict_batch(self.X), model.predict_batch(self.X))


class MlpPredictorTests(SimpleTestCase):

    def test_answers_in_target_units(self):
        """MLP predictions are unscaled back to target units."""
        genome = NetworkGenome((3, 1), np.zeros(3), np.zeros(1), output_activation=Activation.LINEAR)
        model = MlpPredictor(genome, TargetScale(5.0, 2.0))
        self.assertEqual(predict(model, [0.1, 0.2], [0.3]), 5.0)

    def test_learns_a_linear_outcome(self):
        """An MLP Predictor learns a linear outcome."""
        samples = linear_samples(seed=1)
        cfg = MlpConfig(
            hidden_sizes=(16,), output_activation=Activation.LINEAR, epochs=300, batch_size=32,
            learning_rate=0.01, target_scaling=TargetScaling.STANDARDIZE, seed=3,
        )
        model = fit_predictor(samples, PredictorKind.MLP, cfg)
        X, y = samples_to_arrays(samples)
        residual = float(np.mean((model.predict_batch(X) - y) ** 2))
        self.assertLess(residual, 0.1 * float(np.var(y)))

    def test_archive_codec_keeps_predictions(self):
        """A decoded MLP Predictor predicts as before."""
        samples = linear_samples(n=40)
        cfg = MlpConfig(hidden_sizes=(4,), epochs=2, batch_size=16, target_scaling=TargetScaling.BOUND)
        model = fit_predictor(samples, PredictorKind.MLP, cfg)
        X, _ = samples_to_arrays(samples)
        np.testing.assert_array_equal(decode_predictor(encode_predictor(model)).predict_batch(X), model.predict_batch(X))

    def test_input_width_checked(self):
        """Features of the wrong width are rejected."""
        genome = NetworkGenome((3, 1), np.zeros(3), np.zeros(1), output_activation=Activation.LINEAR)
        with self.assertRaises(ShapeError):
            predict(MlpPredictor(genome, TargetScale()), [0.1], [0.3])
