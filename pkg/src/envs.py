"""

Environments

Built-in seeded environments: an n-state chain and the four-rooms grid
(both finite, with an exact FiniteHiTMDP model of the same process) and a
pendulum swing-up task with continuous torque. Also holds the running
observation normalizer.

Environment ids: 'chain:N', 'four_rooms', 'pendulum'.

"""

import logging
from dataclasses import dataclass

import numpy as np

from lab_settings import read_lab_settings
from lab_errors import ConfigError, DimensionError
from hitmdp_core import FiniteHiTMDP, sample_categorical

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

NORM_EPS = 1e-8

FOUR_ROOMS_LAYOUT = (
    'wwwwwwwwwwwww',
    'w     w     w',
    'w     w     w',
    'w           w',
    'w     w     w',
    'w     w     w',
    'ww wwww     w',
    'w     www www',
    'w     w     w',
    'w     w     w',
    'w           w',
    'w     w     w',
    'wwwwwwwwwwwww',
)
FOUR_ROOMS_GOAL = (11, 11)
FOUR_ROOMS_START = (1, 1)
# up, down, left, right
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int
    discrete: bool
    max_episode_steps: int
    reward_range: tuple
    action_scale: float = 1.0

    def __post_init__(self):
        if self.obs_dim < 1 or self.action_dim < 1:
            raise DimensionError(f'Environment dims must be >= 1, got ({self.obs_dim}, {self.action_dim})')


class RunningNormalizer:
    """Running mean and variance in the parallel-update form"""

    def __init__(self, dim):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @property
    def var(self):
        if self.count == 0:
            return np.zeros(self.dim)
        return self.m2 / self.count

    def update(self, x):

        batch = np.atleast_2d(np.asarray(x, dtype=float))
        if batch.shape[1] != self.dim:
            raise DimensionError(f'Normalizer of width {self.dim} got width {batch.shape[1]}')
        n = batch.shape[0]
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean) ** 2).sum(axis=0)
        if self.count == 0:
            self.mean, self.m2 = batch_mean, batch_m2
        else:
            total = self.count + n
            delta = batch_mean - self.mean
            self.mean = self.mean + delta * n / total
            self.m2 = self.m2 + batch_m2 + delta ** 2 * self.count * n / total
        self.count += n

    def normalize(self, x, update=False):
        ''' (x - mean) / sqrt(var + 1e-8), identity until two observations have been folded in'''

        if update:
            self.update(x)
        x = np.asarray(x, dtype=float)
        if self.count < 2:
            return x.copy()
        return (x - self.mean) / np.sqrt(self.var + NORM_EPS)

    def copy(self):

        other = RunningNormalizer(self.dim)
        other.count, other.mean, other.m2 = self.count, self.mean.copy(), self.m2.copy()
        return other

    def state_dict(self):
        return {'count': np.array([self.count], dtype=float), 'mean': self.mean, 'm2': self.m2}

    def load_state_dict(self, tensors):
        self.count = int(np.asarray(tensors['count']).reshape(-1)[0])
        self.mean = np.array(tensors['mean'], dtype=float)
        self.m2 = np.array(tensors['m2'], dtype=float)


class FiniteEnv:
    """
    Finite environment driven by explicit tables.

    Subclasses set transition [S,A,S], reward [S,A], initial_states [S],
    goal_states and implement _is_done.
    """

    name = 'finite'
    max_episode_steps = 100

    def __init__(self, transition, reward, initial_states, goal_states, rng):
        self.transition = np.asarray(transition, dtype=float)
        self.reward = np.asarray(reward, dtype=float)
        self.initial_states = np.asarray(initial_states, dtype=float)
        self.goal_states = tuple(goal_states)
        self.rng = rng
        self.n_states, self.n_actions = self.reward.shape
        self.state = None
        self.steps = 0
        self.spec = EnvSpec(self.n_states, self.n_actions, True, self.max_episode_steps,
                            (float(self.reward.min()), float(self.reward.max())))

    def encode(self, state):
        obs = np.zeros(self.n_states)
        obs[state] = 1.0
        return obs

    def reset(self):
        self.state = int(sample_categorical(self.initial_states, self.rng)[0])
        self.steps = 0
        return self.encode(self.state)

    def _is_done(self, state, next_state):
        return next_state in self.goal_states

    def step(self, action):
        ''' Apply an action id; returns (obs, reward, done, info)'''

        action = int(np.asarray(action).reshape(-1)[0])
        if not 0 <= action < self.n_actions:
            raise DimensionError(f'Action {action} outside [0, {self.n_actions})')
        state = self.state
        next_state = int(sample_categorical(self.transition[state, action], self.rng)[0])
        reward = self._step_reward(state, action, next_state)
        done = self._is_done(state, next_state)
        self.state = next_state
        self.steps += 1
        info = {'state': next_state, 'truncated': (not done) and self.steps >= self.max_episode_steps}
        return self.encode(next_state), reward, done, info

    def _step_reward(self, state, action, next_state):
        return float(self.reward[state, action])

    def model(self, n_options=1, discount=0.9, regularizer_mode='zero'):
        ''' Exact FiniteHiTMDP of this process with a uniform initial option'''

        initial = np.repeat(self.initial_states[:, None], n_options, axis=1) / n_options
        return FiniteHiTMDP(self.n_states, n_options, self.n_actions, self.transition, self.reward,
                            discount, initial, regularizer_mode)


class ChainEnv(FiniteEnv):
    """n-state chain; actions 0 = left, 1 = right; the right terminus pays 1 per step and is absorbing"""

    name = 'chain'

    def __init__(self, n, rng, slip=0.0):
        if not 2 <= n <= 50:
            raise ConfigError(f'Chain length must lie in [2, 50], got {n}')
        transition = np.zeros((n, 2, n))
        reward = np.zeros((n, 2))
        for s in range(n):
            for a, move in enumerate((-1, 1)):
                target = min(max(s + move, 0), n - 1)
                if s == n - 1:
                    target = s
                transition[s, a, target] += 1.0 - slip
                transition[s, a, s] += slip
        reward[n - 1, :] = 1.0
        initial = np.zeros(n)
        initial[0] = 1.0
        super().__init__(transition, reward, initial, (n - 1,), rng)

    def _is_done(self, state, next_state):
        return state in self.goal_states


class FourRoomsEnv(FiniteEnv):
    """13x13 four-rooms grid; entering the goal pays 1 and ends the episode"""

    name = 'four_rooms'
    max_episode_steps = 500

    def __init__(self, rng, slip=0.0, random_start=True, goal=FOUR_ROOMS_GOAL, start=FOUR_ROOMS_START):
        self.cells = [(r, c) for r, row in enumerate(FOUR_ROOMS_LAYOUT) for c, ch in enumerate(row) if ch == ' ']
        self.index = {cell: i for i, cell in enumerate(self.cells)}
        n = len(self.cells)
        goal_state = self.index[goal]

        transition = np.zeros((n, 4, n))
        for s, (r, c) in enumerate(self.cells):
            if s == goal_state:
                transition[s, :, s] = 1.0
                continue
            targets = [self.index.get((r + dr, c + dc), s) for dr, dc in GRID_MOVES]
            for a in range(4):
                transition[s, a, targets[a]] += 1.0 - slip
                for other in range(4):
                    if other != a:
                        transition[s, a, targets[other]] += slip / 3.0
        reward = transition[:, :, goal_state].copy()
        reward[goal_state] = 0.0

        if random_start:
            initial = np.ones(n)
            initial[goal_state] = 0.0
            initial /= initial.sum()
        else:
            initial = np.zeros(n)
            initial[self.index[start]] = 1.0
        super().__init__(transition, reward, initial, (goal_state,), rng)

    def _step_reward(self, state, action, next_state):
        return 1.0 if next_state in self.goal_states and state not in self.goal_states else 0.0


class PendulumEnv:
    """
    Pendulum swing-up with theta = 0 upright.

    Semi-implicit Euler:
      theta_dot <- clip(theta_dot + (3g/(2l) sin(theta) + 3/(m l^2) u) dt, -8, 8)
      theta     <- theta + theta_dot dt
    Reward -(angle^2 + 0.1 theta_dot^2 + 0.001 u^2) on the pre-step state.
    """

    name = 'pendulum'
    gravity = 10.0
    mass = 1.0
    length = 1.0
    max_torque = 2.0

    def __init__(self, rng, dt=0.05, max_speed=8.0, max_episode_steps=200):
        self.rng = rng
        self.dt = dt
        self.max_speed = max_speed
        self.max_episode_steps = max_episode_steps
        self.theta, self.theta_dot = 0.0, 0.0
        self.steps = 0
        self.spec = EnvSpec(3, 1, False, max_episode_steps, (-(np.pi ** 2 + 6.4 + 0.004), 0.0), self.max_torque)

    def _obs(self):
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])

    def reset(self):
        self.theta = float(self.rng.uniform(-np.pi, np.pi))
        self.theta_dot = float(self.rng.uniform(-1.0, 1.0))
        self.steps = 0
        return self._obs()

    def set_state(self, theta, theta_dot):
        self.theta, self.theta_dot = float(theta), float(theta_dot)
        return self._obs()

    def energy(self):
        return 0.5 * self.theta_dot ** 2 + 1.5 * self.gravity / self.length * np.cos(self.theta)

    def step(self, torque):
        ''' Apply a torque in [-2, 2]; returns (obs, reward, done, info)'''

        u = float(np.clip(np.asarray(torque, dtype=float).reshape(-1)[0], -self.max_torque, self.max_torque))
        angle = ((self.theta + np.pi) % (2 * np.pi)) - np.pi
        reward = -(angle ** 2 + 0.1 * self.theta_dot ** 2 + 0.001 * u ** 2)

        accel = 1.5 * self.gravity / self.length * np.sin(self.theta) + 3.0 / (self.mass * self.length ** 2) * u
        theta_dot = self.theta_dot + accel * self.dt
        if self.max_speed is not None:
            theta_dot = float(np.clip(theta_dot, -self.max_speed, self.max_speed))
        self.theta = self.theta + theta_dot * self.dt
        self.theta_dot = theta_dot
        self.steps += 1
        info = {'truncated': self.steps >= self.max_episode_steps}
        return self._obs(), float(reward), False, info


def frictionless_pendulum(rng, dt=1e-4):
    ''' Fine-step pendulum without the speed clip, for integrator checks'''

    return PendulumEnv(rng, dt=dt, max_speed=None, max_episode_steps=10**9)


def chain_env(n, rng=None, slip=0.0):

    return ChainEnv(n, rng if rng is not None else np.random.default_rng(0), slip)


def four_rooms_env(rng=None, slip=0.0, random_start=True):

    return FourRoomsEnv(rng if rng is not None else np.random.default_rng(0), slip, random_start)


def pendulum_env(rng=None):

    return PendulumEnv(rng if rng is not None else np.random.default_rng(0))


def make_env(env_id, rng, **kwargs):
    ''' Build an environment from its string id'''

    if env_id.startswith('chain:'):
        try:
            n = int(env_id.split(':', 1)[1])
        except ValueError:
            raise ConfigError(f'Bad chain length in environment id: {env_id}')
        return ChainEnv(n, rng, **kwargs)
    if env_id == 'four_rooms':
        return FourRoomsEnv(rng, **kwargs)
    if env_id == 'pendulum':
        return PendulumEnv(rng, **kwargs)
    raise ConfigError(f'Unknown environment id: {env_id}')
