import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from .archive import TRACE_HEADER, read_csv, write_trace_csv
from .choices import Activation, TerminalKind
from .environments import (
    FLAP,
    LEFT,
    NOOP,
    RANDOM_AGENT,
    RIGHT,
    CartPoleEnv,
    EnvState,
    FlappyEnv,
    FlappyInternal,
    FlappyParams,
    FunctionEnv,
    cartpole_step,
    flappy_step,
    function_outcome,
    make_environment,
    optimal_function_action,
    prescribe_batch,
    rollout,
)
from .exceptions import ConfigError, EpisodeDoneError, ShapeError
from .neuralnet import NetworkGenome, init_network


def reference_cartpole(state, action):
    """Textbook cart-pole Euler step, written out independently."""
    x, x_dot, theta, theta_dot = state
    force = 10.0 if action == 1 else -10.0
    masspole, total = 0.1, 1.1
    length = 0.5
    s, c = math.sin(theta), math.cos(theta)
    tmp = (force + masspole * length * theta_dot * theta_dot * s) / total
    theta_acc = (9.8 * s - c * tmp) / (length * (4.0 / 3.0 - masspole * c * c / total))
    x_acc = tmp - masspole * length * theta_acc * c / total
    tau = 0.02
    return [x + tau * x_dot, x_dot + tau * x_acc, theta + tau * theta_dot, theta_dot + tau * theta_acc]


class FunctionDomainTests(SimpleTestCase):

    def test_optimal_action_has_zero_outcome(self):
        """The optimal action always earns zero."""
        for c in (-9.0, -1.3, 0.0, 2.5, 7.7):
            self.assertEqual(function_outcome(c, optimal_function_action(c)), 0.0)

    def test_outcome_by_hand(self):
        """At C=0 the outcome is minus the action's magnitude."""
        self.assertEqual(function_outcome(0.0, 2.0), -2.0)

    def test_action_is_clamped(self):
        """Actions beyond the limit count as the limit."""
        self.assertEqual(function_outcome(0.0, 50.0), function_outcome(0.0, 10.0))

    def test_single_step_episode(self):
        """A function episode is one non-positive step."""
        env = FunctionEnv()
        trace = rollout(env, RANDOM_AGENT, np.random.default_rng(0))
        self.assertEqual(len(trace), 1)
        self.assertEqual(trace.terminal_kind, TerminalKind.TIMEOUT)
        self.assertLessEqual(trace.total_reward, 0.0)

    def test_prescribe_batch_scales_tanh_output(self):
        """Batched prescriptions scale tanh outputs to the action range."""
        env = FunctionEnv()
        g = NetworkGenome((1, 1), [1.0], [0.0], output_activation=Activation.TANH)
        actions = prescribe_batch(env, g, np.array([[0.0], [100.0]]))
        np.testing.assert_allclose(actions[:, 0], [0.0, 10.0 * math.tanh(100.0)])


class CartPoleTests(SimpleTestCase):

    def setUp(self):
        self.env = CartPoleEnv()

    def test_dynamics_match_reference_integrator(self):
        """Cart-pole steps match an independent Euler integrator."""
        rng = np.random.default_rng(2024)
        state = self.env.reset(rng)
        for _ in range(10_000):
            action = int(rng.integers(0, 2))
            expected = reference_cartpole([float(v) for v in state.observation], action)
            nxt = self.env.step(state, action)
            np.testing.assert_allclose(nxt.observation, expected, rtol=0, atol=1e-12)
            state = self.env.reset(rng) if nxt.done else nxt

    def test_position_limit_fails(self):
        """Leaving the track is a failure."""
        state = EnvState(np.array([2.39, 1.0, 0.0, 0.0]))
        nxt = self.env.step(state, RIGHT)
        self.assertTrue(nxt.done)
        self.assertEqual(nxt.terminal_kind, TerminalKind.FAILURE)
        # the failing step is still paid
        self.assertEqual(nxt.reward, 1.0)

    def test_angle_limit_fails(self):
        """Tipping past twelve degrees is a failure."""
        state = EnvState(np.array([0.0, 0.0, 0.2094, 1.0]))
        nxt = self.env.step(state, LEFT)
        self.assertGreater(abs(nxt.observation[2]), 12 * math.pi / 180)
        self.assertEqual(nxt.terminal_kind, TerminalKind.FAILURE)

    def test_surviving_two_hundred_steps_succeeds(self):
        """Reaching the step cap is a success."""
        state = EnvState(np.zeros(4), step_index=199)
        nxt = self.env.step(state, LEFT)
        self.assertTrue(nxt.done)
        self.assertEqual(nxt.terminal_kind, TerminalKind.SUCCESS)
        self.assertEqual(nxt.reward, 1.0)

    def test_failure_wins_on_the_last_step(self):
        """Failing on the final step still counts as a failure."""
        state = EnvState(np.array([2.39, 1.0, 0.0, 0.0]), step_index=199)
        self.assertEqual(self.env.step(state, RIGHT).terminal_kind, TerminalKind.FAILURE)

    def test_stepping_a_finished_episode(self):
        """A finished episode cannot be stepped."""
        done = EnvState(np.zeros(4), 3, True, TerminalKind.FAILURE)
        with self.assertRaises(EpisodeDoneError):
            self.env.step(done, LEFT)

    def test_invalid_action(self):
        """Only actions 0 and 1 are accepted."""
        with self.assertRaises(ShapeError):
            self.env.step(EnvState(np.zeros(4)), 2)

    def test_helper_matches_env(self):
        """cartpole_step is the environment's step."""
        state = EnvState(np.array([0.01, -0.02, 0.03, 0.04]))
        np.testing.assert_array_equal(cartpole_step(state, RIGHT).observation, self.env.step(state, RIGHT).observation)

    def test_random_rollout_rewards_every_step(self):
        """Every cart-pole step pays one, so the reward equals the length."""
        trace = rollout(self.env, RANDOM_AGENT, np.random.default_rng(1))
        self.assertLessEqual(len(trace), 200)
        self.assertEqual(trace.total_reward, float(len(trace)))
        self.assertIn(trace.terminal_kind, (TerminalKind.FAILURE, TerminalKind.SUCCESS))
        self.assertTrue(trace.steps[-1].done)
        np.testing.assert_array_equal(trace.steps[0].action.sum(), 1.0)

    def test_step_cap_is_a_timeout(self):
        """Stopping a rollout early is recorded as a timeout."""
        g = init_network([4, 8, 2], output_activation=Activation.ARGMAX, seed=0)
        trace = rollout(self.env, g, np.random.default_rng(0), max_steps=3, initial_state=EnvState(np.zeros(4)))
        self.assertEqual(len(trace), 3)
        self.assertEqual(trace.terminal_kind, TerminalKind.TIMEOUT)

    def test_policy_width_checked(self):
        """A policy with the wrong input width is rejected."""
        g = init_network([3, 2], output_activation=Activation.ARGMAX, seed=0)
        with self.assertRaises(ShapeError):
            rollout(self.env, g, np.random.default_rng(0))

    def test_physics_overrides(self):
        """Known overrides apply and unknown or invalid ones are rejected."""
        env = make_environment("cartpole", {"max_steps": 50})
        self.assertEqual(env.max_steps, 50)
        self.assertEqual(env.optimum_reward, 50.0)
        with self.assertRaises(ConfigError):
            make_environment("cartpole", {"wind": 3})
        with self.assertRaises(ConfigError):
            make_environment("cartpole", {"gravity": -1})
        with self.assertRaises(ConfigError):
            make_environment("pong")


class FlappyTests(SimpleTestCase):

    def setUp(self):
        self.env = FlappyEnv()

    def test_observation_layout(self):
        """The observation lists the bird and the next two gaps."""
        state = self.env.reset(np.random.default_rng(0))
        obs = state.observation
        self.assertEqual(obs.shape, (8,))
        self.assertEqual(obs[0], 256.0)
        self.assertEqual(obs[1], 0.0)
        self.assertAlmostEqual(obs[4] - obs[3], 100.0)
        self.assertAlmostEqual(obs[5] - obs[2], 160.0)

    def test_gap_jumps_are_bounded(self):
        """Consecutive gaps move at most max_gap_shift and stay on screen."""
        p = self.env.params
        internal = self.env.reset(np.random.default_rng(3)).internal
        centers = np.array(internal.gap_centers + internal.upcoming)
        self.assertLessEqual(float(np.max(np.abs(np.diff(centers)))), p.max_gap_shift + 1e-9)
        self.assertGreaterEqual(centers.min(), p.gap_margin + p.gap_size / 2 - 1e-9)
        self.assertLessEqual(centers.max(), p.height - p.gap_margin - p.gap_size / 2 + 1e-9)

    def test_never_flapping_hits_the_ground(self):
        """A bird that never flaps falls out of the bottom."""
        state = self.env.reset(np.random.default_rng(1))
        steps = 0
        while not state.done:
            state = self.env.step(state, NOOP)
            steps += 1
        self.assertEqual(state.terminal_kind, TerminalKind.FAILURE)
        self.assertEqual(state.reward, 0.0)
        self.assertLess(steps, 60)

    def test_always_flapping_hits_the_ceiling(self):
        """A bird that always flaps leaves through the top."""
        state = self.env.reset(np.random.default_rng(1))
        while not state.done:
            state = self.env.step(state, FLAP)
        self.assertEqual(state.terminal_kind, TerminalKind.FAILURE)
        self.assertLess(state.internal.bird_y, 0.0)

    def test_short_episode_succeeds(self):
        """Surviving max_frames is a success."""
        env = FlappyEnv(FlappyParams(max_frames=5))
        trace = rollout(env, RANDOM_AGENT, np.random.default_rng(0))
        self.assertEqual(len(trace), 5)
        self.assertEqual(trace.total_reward, 5.0)
        self.assertEqual(trace.terminal_kind, TerminalKind.SUCCESS)

    def test_failure_step_earns_nothing(self):
        """The colliding frame pays nothing."""
        trace = rollout(self.env, RANDOM_AGENT, np.random.default_rng(2))
        if trace.terminal_kind == TerminalKind.FAILURE:
            self.assertEqual(trace.total_reward, float(len(trace) - 1))

    def test_encoded_observation_is_scaled(self):
        """Encoded observations are roughly unit scale."""
        obs = self.env.reset(np.random.default_rng(0)).observation
        encoded = self.env.encode(obs)
        self.assertAlmostEqual(float(encoded[0]), 0.5)
        self.assertTrue(np.all(np.abs(encoded) <= 2.0))

    def test_helper_matches_env(self):
        """flappy_step is the environment's step."""
        state = self.env.reset(np.random.default_rng(6))
        for action in (FLAP, NOOP):
            np.testing.assert_array_equal(
                flappy_step(state, action).observation, self.env.step(state, action).observation
            )

    def test_invalid_geometry(self):
        """Margins that leave no room for the gap are rejected."""
        with self.assertRaises(ConfigError):
            FlappyParams(gap_margin=250.0)

    def test_non_positive_physics_rejected(self):
        """Zero or negative sizes and a downward flap are config errors."""
        for override in ({"pipe_spacing": 0.0}, {"width": -1.0}, {"pipe_width": 0.0}, {"gravity": 0.0}):
            with self.assertRaises(ConfigError, msg=override):
                make_environment("flappy", override)
        with self.assertRaises(ConfigError):
            make_environment("flappy", {"flap_velocity": 9.0})

    def test_sparse_or_narrow_courses_keep_two_pipes_ahead(self):
        """Wide pipe spacing or a narrow screen still shows two pipes at every step."""
        for override in ({"pipe_spacing": 400.0}, {"width": 100.0}, {"pipe_spacing": 400.0, "width": 60.0}):
            env = make_environment("flappy", {**override, "max_frames": 400})
            trace = rollout(env, RANDOM_AGENT, np.random.default_rng(5))
            self.assertGreater(len(trace), 0)
            for step in trace.steps:
                # both observed pipes are ahead of the bird and in spawn order
                self.assertGreaterEqual(step.observation[2], -env.params.pipe_width)
                self.assertGreater(step.observation[5], step.observation[2])

    def test_course_outlives_the_drawn_gap_centers(self):
        """Once the drawn centers run out new pipes reuse the last one."""
        env = FlappyEnv(FlappyParams(max_frames=40))
        internal = FlappyInternal(256.0, 0.0, (100.0, 260.0), (256.0, 256.0), ())
        state = env.state_for(internal)
        for _ in range(30):
            # hover around the middle of the gap
            state = env.step(state, FLAP if state.internal.bird_y > 256.0 else NOOP)
        self.assertFalse(state.done)
        self.assertEqual(len(state.internal.pipe_xs), 4)
        self.assertEqual(set(state.internal.gap_centers), {256.0})


FIXTURES = Path(__file__).resolve().parent / "fixtures"


class GoldenTraceTests(SimpleTestCase):
    """Fixed linear policies replayed from fixed starts must reproduce the traces pinned in esp/fixtures."""

    def assertMatchesFixture(self, env, trace, name):
        pinned_path = FIXTURES / name
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / name
            write_trace_csv(path, env, trace)
            self.assertEqual(path.read_text().splitlines()[0], TRACE_HEADER)
            rows = read_csv(path)
        self.assertEqual(pinned_path.read_text().splitlines()[0], TRACE_HEADER)
        pinned = read_csv(pinned_path)
        self.assertEqual(list(rows[0]), list(pinned[0]))
        self.assertEqual(len(rows), len(pinned))
        floats = [k for k in pinned[0] if k.startswith("obs_")] + ["reward"]
        for row, expected in zip(rows, pinned):
            for key in ("step", "action", "done"):
                self.assertEqual(int(row[key]), int(expected[key]), f"step {expected['step']}: {key}")
            np.testing.assert_allclose(
                [float(row[k]) for k in floats], [float(expected[k]) for k in floats],
                rtol=1e-9, atol=1e-12, err_msg=f"step {expected['step']}",
            )

    def test_cartpole_trace(self):
        """A PD-style controller balances for the full 200 steps."""
        policy = NetworkGenome(
            (4, 2), [0.0, 0.0, 0.0, 0.0, 0.1, 0.5, 10.0, 2.0], [0.0, 0.0], output_activation=Activation.ARGMAX,
        )
        env = CartPoleEnv()
        start = EnvState(np.array([0.02, 0.0, -0.03, 0.01]))
        trace = rollout(env, policy, np.random.default_rng(0), initial_state=start)
        self.assertEqual(trace.terminal_kind, TerminalKind.SUCCESS)
        self.assertMatchesFixture(env, trace, "cartpole_seed0.csv")

    def test_flappy_trace(self):
        """A gap-tracking controller clears two pipes and then clips a gap top."""
        weights = [1.0, -0.02, 0.0, -0.5, -0.5, 0.0, 0.0, 0.0] + [0.0] * 8
        policy = NetworkGenome((8, 2), weights, [-0.005, 0.0], output_activation=Activation.ARGMAX)
        env = FlappyEnv(FlappyParams(max_frames=400))
        course = FlappyInternal(
            256.0, 0.0,
            (288.0, 448.0, 608.0, 768.0),
            (256.0, 300.0, 220.0, 260.0),
            (200.0, 280.0, 320.0, 240.0, 180.0, 250.0, 300.0, 260.0, 210.0, 230.0, 270.0, 290.0),
        )
        trace = rollout(env, policy, np.random.default_rng(0), initial_state=env.state_for(course))
        self.assertEqual(trace.terminal_kind, TerminalKind.FAILURE)
        self.assertEqual(len(trace), 148)
        self.assertEqual(trace.steps[-1].reward, 0.0)
        self.assertMatchesFixture(env, trace, "flappy_seed0.csv")
