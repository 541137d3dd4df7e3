"""
The three experiment domains behind one episodic interface.

Environments are value-semantic: ``reset`` builds a fresh ``EnvState`` from an
RNG and ``step`` returns a new state, so any number of rollouts can run side by
side without sharing anything mutable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np

from .choices import Activation, Domain, TerminalKind
from .exceptions import ConfigError, EpisodeDoneError, ShapeError
from .neuralnet import NetworkGenome, forward, forward_batch

# -------- shared types --------


@dataclass(frozen=True, eq=False)
class EnvState:
    observation: np.ndarray
    step_index: int = 0
    done: bool = False
    terminal_kind: str = TerminalKind.NONE
    reward: float = 0.0
    internal: Any = None


@dataclass(frozen=True, eq=False)
class Step:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    done: bool


@dataclass(eq=False)
class EpisodeTrace:
    steps: list[Step] = field(default_factory=list)
    terminal_kind: str = TerminalKind.NONE

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


class RandomAgent:
    """Chooses a uniformly random action at every step."""

    def __repr__(self):
        return "RandomAgent()"


RANDOM_AGENT = RandomAgent()


class Environment:
    domain: str = ""
    observation_size: int = 0
    action_size: int = 0
    discrete: bool = True

    @property
    def max_steps(self) -> int:
        raise NotImplementedError

    @property
    def optimum_reward(self) -> float:
        raise NotImplementedError

    def reset(self, rng: np.random.Generator) -> EnvState:
        raise NotImplementedError

    def step(self, state: EnvState, action) -> EnvState:
        raise NotImplementedError

    def encode(self, observation: np.ndarray) -> np.ndarray:
        """Observation as fed to Prescriptors and Predictors."""
        return np.asarray(observation, dtype=np.float64)

    def encode_batch(self, observations: np.ndarray) -> np.ndarray:
        return np.asarray(observations, dtype=np.float64)

    def action_vector(self, action) -> np.ndarray:
        """Action as stored in traces and fed to Predictors."""
        if self.discrete:
            one_hot = np.zeros(self.action_size)
            one_hot[int(action)] = 1.0
            return one_hot
        return np.array([float(action)])

    def decode_output(self, output: np.ndarray):
        """Prescriptor network output -> domain action."""
        if self.discrete:
            return int(np.argmax(output))
        return float(output[0])

    def decode_batch(self, outputs: np.ndarray) -> np.ndarray:
        """Batched Prescriptor outputs -> action vectors for the Predictor."""
        return np.asarray(outputs, dtype=np.float64)

    def random_action(self, rng: np.random.Generator):
        raise NotImplementedError

    def prescriptor_output_activation(self) -> str:
        return Activation.ARGMAX if self.discrete else Activation.TANH

    def _ensure_running(self, state: EnvState):
        if state.done:
            raise EpisodeDoneError(f"Cannot step a finished {self.domain} episode.")


def _with_overrides(params_cls, overrides: dict[str, Any] | None):
    overrides = dict(overrides or {})
    known = {f.name for f in fields(params_cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"Unknown {params_cls.__name__} parameter(s): {', '.join(unknown)}.")
    return params_cls(**overrides)


# -------- function approximation --------

ACTION_LIMIT = 10.0


def function_outcome(context: float, action: float) -> float:
    action = min(ACTION_LIMIT, max(-ACTION_LIMIT, float(action)))
    return -abs(action - 3.0 * math.sin(float(context) / 2.0))


def optimal_function_action(context: float) -> float:
    return 3.0 * math.sin(float(context) / 2.0)


@dataclass(frozen=True)
class FunctionParams:
    context_low: float = -10.0
    context_high: float = 10.0


class FunctionEnv(Environment):
    """Single-step episodes: observe C, act A, receive -|A - 3 sin(C/2)|."""
    domain = Domain.FUNCTION
    observation_size = 1
    action_size = 1
    discrete = False

    def __init__(self, params: FunctionParams | None = None):
        self.params = params or FunctionParams()

    @property
    def max_steps(self) -> int:
        return 1

    @property
    def optimum_reward(self) -> float:
        return 0.0

    def reset(self, rng):
        context = rng.uniform(self.params.context_low, self.params.context_high)
        return EnvState(np.array([context]))

    def state_for(self, context: float) -> EnvState:
        return EnvState(np.array([float(context)]))

    def step(self, state, action):
        self._ensure_running(state)
        reward = function_outcome(state.observation[0], float(np.asarray(action).reshape(-1)[0]))
        return EnvState(state.observation, state.step_index + 1, True, TerminalKind.TIMEOUT, reward)

    def decode_output(self, output):
        # tanh output in [-1, 1] covers the action range
        return float(np.clip(output[0] * ACTION_LIMIT, -ACTION_LIMIT, ACTION_LIMIT))

    def decode_batch(self, outputs):
        return np.clip(np.asarray(outputs, dtype=np.float64)[:, :1] * ACTION_LIMIT, -ACTION_LIMIT, ACTION_LIMIT)

    def random_action(self, rng):
        return float(rng.uniform(-ACTION_LIMIT, ACTION_LIMIT))


# -------- cart-pole --------

@dataclass(frozen=True)
class CartPoleParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_magnitude: float = 10.0
    timestep: float = 0.02
    position_limit: float = 2.4
    angle_limit_degrees: float = 12.0
    max_steps: int = 200
    initial_state_bound: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"CartPoleParams.{f.name} must be positive.")

    @property
    def angle_limit(self) -> float:
        return self.angle_limit_degrees * 2.0 * math.pi / 360.0


LEFT, RIGHT = 0, 1


class CartPoleEnv(Environment):
    """Classic cart-pole with explicit Euler integration; state is (x, x_dot, theta, theta_dot)."""
    domain = Domain.CARTPOLE
    observation_size = 4
    action_size = 2
    discrete = True

    def __init__(self, params: CartPoleParams | None = None):
        self.params = params or CartPoleParams()

    @property
    def max_steps(self) -> int:
        return self.params.max_steps

    @property
    def optimum_reward(self) -> float:
        return float(self.params.max_steps)

    def reset(self, rng):
        b = self.params.initial_state_bound
        return EnvState(rng.uniform(-b, b, size=4))

    def dynamics(self, observation: np.ndarray, action: int) -> np.ndarray:
        p = self.params
        x, x_dot, theta, theta_dot = (float(v) for v in observation)
        force = p.force_magnitude if action == RIGHT else -p.force_magnitude
        total_mass = p.cart_mass + p.pole_mass
        polemass_length = p.pole_mass * p.pole_half_length
        cos_t, sin_t = math.cos(theta), math.sin(theta)

        temp = (force + polemass_length * theta_dot ** 2 * sin_t) / total_mass
        theta_acc = (p.gravity * sin_t - cos_t * temp) / (
            p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos_t ** 2 / total_mass)
        )
        x_acc = temp - polemass_length * theta_acc * cos_t / total_mass

        return np.array([
            x + p.timestep * x_dot,
            x_dot + p.timestep * x_acc,
            theta + p.timestep * theta_dot,
            theta_dot + p.timestep * theta_acc,
        ])

    def step(self, state, action):
        self._ensure_running(state)
        action = int(action)
        if action not in (LEFT, RIGHT):
            raise ShapeError(f"Cart-pole action must be 0 (left) or 1 (right), got {action}.")
        obs = self.dynamics(state.observation, action)
        step_index = state.step_index + 1
        p = self.params
        failed = abs(obs[0]) > p.position_limit or abs(obs[2]) > p.angle_limit
        if failed:
            kind = TerminalKind.FAILURE
        elif step_index >= p.max_steps:
            # surviving the whole episode counts as success
            kind = TerminalKind.SUCCESS
        else:
            kind = TerminalKind.NONE
        return EnvState(obs, step_index, kind != TerminalKind.NONE, kind, 1.0)

    def random_action(self, rng):
        return int(rng.integers(0, 2))


# -------- flappy side-scroller --------

@dataclass(frozen=True)
class FlappyParams:
    width: float = 288.0
    height: float = 512.0
    gravity: float = 1.0
    flap_velocity: float = -9.0
    max_fall_speed: float = 10.0
    scroll_speed: float = 4.0
    gap_size: float = 100.0
    pipe_width: float = 52.0
    pipe_spacing: float = 160.0
    bird_x: float = 57.0
    bird_width: float = 34.0
    bird_height: float = 24.0
    gap_margin: float = 60.0
    max_gap_shift: float = 120.0
    first_pipe_x: float = 288.0
    max_frames: int = 3600

    def __post_init__(self):
        if self.max_frames < 1:
            raise ConfigError("FlappyParams.max_frames must be positive.")
        for name in (
            "width", "height", "gravity", "max_fall_speed", "scroll_speed",
            "gap_size", "pipe_width", "pipe_spacing", "bird_width", "bird_height",
        ):
            if not getattr(self, name) > 0:
                raise ConfigError(f"FlappyParams.{name} must be positive.")
        if not self.flap_velocity < 0:
            # screen y grows downwards
            raise ConfigError("FlappyParams.flap_velocity must be negative.")
        for name in ("gap_margin", "max_gap_shift"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"FlappyParams.{name} must not be negative.")
        if self.height - 2 * self.gap_margin < self.gap_size:
            raise ConfigError("gap_margin leaves no room for the pipe gap.")


@dataclass(frozen=True)
class FlappyInternal:
    bird_y: float
    bird_velocity: float
    pipe_xs: tuple[float, ...]
    gap_centers: tuple[float, ...]
    # centers for pipes not spawned yet, consumed front to back
    upcoming: tuple[float, ...]


FLAP, NOOP = 0, 1


class FlappyEnv(Environment):
    """
    Arcade flappy physics at one step per frame (30 frames per second).

    Observation: bird_y, bird_velocity, dist_to_next_pipe, next_gap_top,
    next_gap_bottom, dist_to_second_pipe, second_gap_top, second_gap_bottom.
    """
    domain = Domain.FLAPPY
    observation_size = 8
    action_size = 2
    discrete = True

    def __init__(self, params: FlappyParams | None = None):
        self.params = params or FlappyParams()

    @property
    def max_steps(self) -> int:
        return self.params.max_frames

    @property
    def optimum_reward(self) -> float:
        return float(self.params.max_frames)

    def _gap_sequence(self, rng, count: int) -> tuple[float, ...]:
        p = self.params
        low = p.gap_margin + p.gap_size / 2.0
        high = p.height - p.gap_margin - p.gap_size / 2.0
        centers = [rng.uniform(low, high)]
        for _ in range(count - 1):
            # bounded jumps keep every course survivable
            lo = max(low, centers[-1] - p.max_gap_shift)
            hi = min(high, centers[-1] + p.max_gap_shift)
            centers.append(rng.uniform(lo, hi))
        return tuple(float(c) for c in centers)

    def reset(self, rng):
        p = self.params
        travelled = p.max_frames * p.scroll_speed
        count = int(math.ceil((travelled + p.first_pipe_x + p.width) / p.pipe_spacing)) + 3
        centers = self._gap_sequence(rng, count)
        n_visible = self._pipes_kept
        xs = [p.first_pipe_x + i * p.pipe_spacing for i in range(n_visible)]
        shown = list(centers[:n_visible])
        upcoming = self._top_up(xs, shown, centers[n_visible:])
        internal = FlappyInternal(p.height / 2.0, 0.0, tuple(xs), tuple(shown), upcoming)
        return self.state_for(internal)

    def state_for(self, internal: FlappyInternal) -> EnvState:
        """Episode start from an explicit course, e.g. to replay a pinned trace."""
        return EnvState(self._observe(internal), internal=internal)

    @property
    def _pipes_kept(self) -> int:
        p = self.params
        return max(2, int(math.ceil((p.width + p.pipe_width) / p.pipe_spacing)) + 1)

    def _top_up(
        self, xs: list[float], centers: list[float], upcoming: tuple[float, ...]
    ) -> tuple[float, ...]:
        """Spawn pipes in place until the screen is covered and two pipes are ahead of the bird."""
        p = self.params
        while len(xs) < self._pipes_kept or sum(x + p.pipe_width >= p.bird_x for x in xs) < 2:
            xs.append(xs[-1] + p.pipe_spacing)
            if upcoming:
                centers.append(upcoming[0])
                upcoming = upcoming[1:]
            else:
                centers.append(centers[-1])
        return upcoming

    def _upcoming_pipes(self, internal: FlappyInternal) -> list[tuple[float, float]]:
        p = self.params
        return [
            (x, c) for x, c in zip(internal.pipe_xs, internal.gap_centers)
            if x + p.pipe_width >= p.bird_x
        ]

    def _observe(self, internal: FlappyInternal) -> np.ndarray:
        p = self.params
        ahead = self._upcoming_pipes(internal)
        (x1, c1), (x2, c2) = ahead[0], ahead[1]
        half = p.gap_size / 2.0
        return np.array([
            internal.bird_y,
            internal.bird_velocity,
            x1 - p.bird_x,
            c1 - half,
            c1 + half,
            x2 - p.bird_x,
            c2 - half,
            c2 + half,
        ])

    def _collides(self, internal: FlappyInternal) -> bool:
        p = self.params
        top, bottom = internal.bird_y, internal.bird_y + p.bird_height
        if top < 0 or bottom > p.height:
            return True
        for x, c in zip(internal.pipe_xs, internal.gap_centers):
            overlaps = x < p.bird_x + p.bird_width and p.bird_x < x + p.pipe_width
            if overlaps and (top < c - p.gap_size / 2.0 or bottom > c + p.gap_size / 2.0):
                return True
        return False

    def step(self, state, action):
        self._ensure_running(state)
        p = self.params
        s: FlappyInternal = state.internal
        if int(action) == FLAP:
            velocity = p.flap_velocity
        else:
            velocity = min(s.bird_velocity + p.gravity, p.max_fall_speed)
        bird_y = s.bird_y + velocity

        xs = [x - p.scroll_speed for x in s.pipe_xs]
        centers = list(s.gap_centers)
        while len(xs) > 1 and xs[0] + p.pipe_width < 0:
            xs.pop(0)
            centers.pop(0)
        upcoming = self._top_up(xs, centers, s.upcoming)

        internal = FlappyInternal(bird_y, velocity, tuple(xs), tuple(centers), upcoming)
        step_index = state.step_index + 1
        if self._collides(internal):
            kind = TerminalKind.FAILURE
        elif step_index >= p.max_frames:
            kind = TerminalKind.SUCCESS
        else:
            kind = TerminalKind.NONE
        reward = 0.0 if kind == TerminalKind.FAILURE else 1.0
        return EnvState(self._observe(internal), step_index, kind != TerminalKind.NONE, kind, reward, internal)

    def encode(self, observation):
        return self.encode_batch(np.asarray(observation, dtype=np.float64)[None, :])[0]

    def encode_batch(self, observations):
        p = self.params
        obs = np.asarray(observations, dtype=np.float64)
        scale = np.array([p.height, p.max_fall_speed, p.width, p.height, p.height, p.width, p.height, p.height])
        return obs / scale

    def random_action(self, rng):
        return int(rng.integers(0, 2))


# -------- registry and rollout --------

ENVIRONMENTS = {
    Domain.FUNCTION: (FunctionEnv, FunctionParams),
    Domain.CARTPOLE: (CartPoleEnv, CartPoleParams),
    Domain.FLAPPY: (FlappyEnv, FlappyParams),
}


def make_environment(domain: str, physics: dict[str, Any] | None = None) -> Environment:
    try:
        env_cls, params_cls = ENVIRONMENTS[domain]
    except KeyError:
        raise ConfigError(f"Unknown domain {domain!r}.") from None
    return env_cls(_with_overrides(params_cls, physics))


def cartpole_step(state: EnvState, action: int, params: CartPoleParams | None = None) -> EnvState:
    return CartPoleEnv(params).step(state, action)


def flappy_step(state: EnvState, action: int, params: FlappyParams | None = None) -> EnvState:
    return FlappyEnv(params).step(state, action)


def choose_action(env: Environment, policy, observation: np.ndarray, rng: np.random.Generator):
    if isinstance(policy, RandomAgent):
        return env.random_action(rng)
    return env.decode_output(forward(policy, env.encode(observation)))


def rollout(
    env: Environment,
    policy: NetworkGenome | RandomAgent,
    rng: np.random.Generator,
    max_steps: int | None = None,
    initial_state: EnvState | None = None,
) -> EpisodeTrace:
    if isinstance(policy, NetworkGenome) and policy.input_size != env.observation_size:
        raise ShapeError(
            f"Policy takes {policy.input_size} inputs but {env.domain} observations have {env.observation_size}."
        )
    cap = env.max_steps if max_steps is None else min(max_steps, env.max_steps)
    state = initial_state if initial_state is not None else env.reset(rng)
    trace = EpisodeTrace()
    while True:
        action = choose_action(env, policy, state.observation, rng)
        next_state = env.step(state, action)
        done = next_state.done or next_state.step_index >= cap
        trace.steps.append(Step(state.observation, env.action_vector(action), next_state.reward, done))
        state = next_state
        if done:
            trace.terminal_kind = state.terminal_kind if state.done else TerminalKind.TIMEOUT
            return trace


def prescribe_batch(env: Environment, policy: NetworkGenome, contexts: np.ndarray) -> np.ndarray:
    """Action vectors a Prescriptor emits for a matrix of encoded contexts."""
    return env.decode_batch(forward_batch(policy, contexts))
