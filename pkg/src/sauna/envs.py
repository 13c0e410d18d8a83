"""Seedable continuous-control environments and observation normalisation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, UsageError


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    observation_low: np.ndarray
    observation_high: np.ndarray
    max_episode_steps: int

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ConfigurationError("state_dim and action_dim must be positive")
        if not np.all(self.action_low < self.action_high):
            raise ConfigurationError("action_low must be < action_high elementwise")
        if self.max_episode_steps < 1:
            raise ConfigurationError("max_episode_steps must be >= 1")


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


def wrap_angle(theta):
    """Map an angle to [-pi, pi)."""
    return ((theta + math.pi) % (2.0 * math.pi)) - math.pi


class Env:
    """Common episode bookkeeping: clipping, time limit, done checks."""

    spec: EnvSpec

    def __init__(self, seed=None):
        self._rng = np.random.default_rng(seed)
        self._t = 0
        self._done = True

    def reset(self, seed=None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._t = 0
        self._done = False
        self._reset_state(self._rng)
        return self.observation()

    def step(self, action) -> StepResult:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        spec = self.spec
        action = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
        action = np.minimum(np.maximum(action, spec.action_low), spec.action_high)
        reward, terminal = self._advance(action)
        self._t += 1
        truncated = (not terminal) and self._t >= self.spec.max_episode_steps
        self._done = terminal or truncated
        return StepResult(self.observation(), float(reward), bool(terminal), bool(truncated))

    @property
    def elapsed_steps(self):
        return self._t

    def observation(self):
        raise NotImplementedError

    def _reset_state(self, rng):
        raise NotImplementedError

    def _advance(self, action):
        raise NotImplementedError


class Pendulum(Env):
    """Torque-controlled swing-up; angle 0 is upright.

    ``theta_acc = 3g/(2l) sin(theta) + 3/(m l^2) u``, integrated with
    semi-implicit Euler (velocity first, clamped to [-8, 8], then angle).
    Reward ``-(wrap(theta)^2 + 0.1 thetadot^2 + 0.001 u^2)`` on the pre-step
    state. Never terminal; 200-step limit. Initial angle ~ U[-pi, pi],
    initial angular velocity ~ U[-1, 1].
    """

    g = 10.0
    m = 1.0
    l = 1.0
    dt = 0.05
    max_speed = 8.0
    max_torque = 2.0

    spec = EnvSpec(
        name="pendulum",
        state_dim=3,
        action_dim=1,
        action_low=np.array([-2.0]),
        action_high=np.array([2.0]),
        observation_low=np.array([-1.0, -1.0, -8.0]),
        observation_high=np.array([1.0, 1.0, 8.0]),
        max_episode_steps=200,
    )

    def __init__(self, seed=None):
        super().__init__(seed)
        self.theta = 0.0
        self.theta_dot = 0.0

    def _reset_state(self, rng):
        self.theta = float(rng.uniform(-math.pi, math.pi))
        self.theta_dot = float(rng.uniform(-1.0, 1.0))

    def set_state(self, theta, theta_dot):
        self.theta = float(theta)
        self.theta_dot = float(theta_dot)

    def observation(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot])

    def _advance(self, action):
        u = float(action[0])
        th, thdot = self.theta, self.theta_dot
        cost = wrap_angle(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        acc = 3.0 * self.g / (2.0 * self.l) * math.sin(th) + 3.0 / (self.m * self.l ** 2) * u
        thdot = min(max(thdot + acc * self.dt, -self.max_speed), self.max_speed)
        self.theta = th + thdot * self.dt
        self.theta_dot = thdot
        return -cost, False


class PointMass(Env):
    """2-D double integrator driven to a goal at the origin.

    State ``(x, y, vx, vy)``. Actions are accelerations in [-1, 1]^2;
    ``v += a dt`` (clamped to [-2, 2]) then ``p += v dt`` (clamped to the
    [-2, 2] box, zeroing velocity on the clamped axis). Reward is the negated
    distance to the goal after the move; the episode terminates once that
    distance is below 0.05. 300-step limit.
    """

    dt = 0.1
    bound = 2.0
    max_speed = 2.0
    goal_radius = 0.05

    spec = EnvSpec(
        name="pointmass",
        state_dim=4,
        action_dim=2,
        action_low=np.array([-1.0, -1.0]),
        action_high=np.array([1.0, 1.0]),
        observation_low=np.array([-2.0, -2.0, -2.0, -2.0]),
        observation_high=np.array([2.0, 2.0, 2.0, 2.0]),
        max_episode_steps=300,
    )

    def __init__(self, seed=None, goal=(0.0, 0.0)):
        super().__init__(seed)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def _reset_state(self, rng):
        self.pos = rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)

    def set_state(self, pos, vel):
        self.pos = np.asarray(pos, dtype=np.float64).copy()
        self.vel = np.asarray(vel, dtype=np.float64).copy()

    def observation(self):
        return np.concatenate([self.pos, self.vel])

    def _advance(self, action):
        vel = np.clip(self.vel + action * self.dt, -self.max_speed, self.max_speed)
        pos = self.pos + vel * self.dt
        hit = np.abs(pos) > self.bound
        pos = np.clip(pos, -self.bound, self.bound)
        vel = np.where(hit, 0.0, vel)
        self.pos, self.vel = pos, vel
        dist = float(np.linalg.norm(pos - self.goal))
        return -dist, dist < self.goal_radius


ENVIRONMENTS = {"pendulum": Pendulum, "pointmass": PointMass}


def make_env(name, seed=None) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(seed=seed)


class RunningNormalizer:
    """Running mean/variance (parallel Welford) with clipped normalisation."""

    def __init__(self, dim, clip=10.0, eps=1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = eps
        self.clip = clip
        self.eps = eps
        self.frozen = False

    def update(self, x):
        if self.frozen:
            return
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            # single sample: plain Welford step
            total = self.count + 1.0
            delta = x - self.mean
            self.mean = self.mean + delta / total
            self.var = (self.var * self.count + delta * (x - self.mean)) / total
            self.count = total
            return
        batch_mean = x.mean(axis=0)
        batch_var = x.var(axis=0)
        n = x.shape[0]
        delta = batch_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + batch_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x):
        z = (x - self.mean) / np.sqrt(self.var + self.eps)
        return np.minimum(np.maximum(z, -self.clip), self.clip)

    def state_dict(self):
        return {"mean": self.mean.copy(), "var": self.var.copy(),
                "count": np.array([self.count])}

    def load_state_dict(self, d):
        self.mean = np.asarray(d["mean"], dtype=np.float64).copy()
        self.var = np.asarray(d["var"], dtype=np.float64).copy()
        self.count = float(np.asarray(d["count"]).ravel()[0])


class IdentityNormalizer:
    frozen = True

    def update(self, x):
        pass

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64)

    def state_dict(self):
        return {}

    def load_state_dict(self, d):
        pass
