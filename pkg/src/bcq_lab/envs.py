"""Built-in environments: tabular toys and a pendulum swing-up task."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from bcq_lab.mdp import FiniteMdp, TabularEnv
from bcq_lab.rng import as_generator


def make_two_state(discount: float = 0.99) -> FiniteMdp:
    """Two states, two actions; reward 1 only for a1 at s0.

    a1 moves s0 -> s1 and keeps s1 in place; a0 moves s1 -> s0 and keeps s0
    in place.
    """
    p = np.zeros((2, 2, 2))
    p[0, 0, 0] = p[0, 1, 1] = p[1, 0, 0] = p[1, 1, 1] = 1.0
    r = np.zeros((2, 2, 2))
    r[0, 1, 1] = 1.0
    return FiniteMdp(p, r, discount, np.array([1.0, 0.0]))


def two_state_batch_transitions():
    """The optimal-behaviour batch {(s0, a1, 1, s1), (s1, a0, 0, s0)}."""
    return [(0, 1, 1.0, 1, False), (1, 0, 0.0, 0, False)]


@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int
    n_actions: int
    deterministic: bool = False
    reward_range: tuple = (0.0, 1.0)
    branching: int = 3
    seed: int = 0
    discount: float = 0.9
    n_start: int = 1
    n_terminal: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.n_actions < 1:
            raise ValueError("n_states and n_actions must be positive")
        if not 1 <= self.branching <= self.n_states:
            raise ValueError("branching must lie in [1, n_states]")
        if not 1 <= self.n_start <= self.n_states - self.n_terminal:
            raise ValueError("n_start must leave room for the terminal states")
        if self.reward_range[0] > self.reward_range[1]:
            raise ValueError("reward_range must be (low, high) with low <= high")


def make_random_mdp(spec: RandomMdpSpec) -> FiniteMdp:
    """Random MDP, reproducible from ``spec.seed``.

    The last ``n_terminal`` states are terminal; the first ``n_start`` states
    share the initial distribution uniformly.
    """
    rng = np.random.default_rng(spec.seed)
    n_s, n_a = spec.n_states, spec.n_actions
    k = 1 if spec.deterministic else spec.branching
    p = np.zeros((n_s, n_a, n_s))
    for s in range(n_s):
        for a in range(n_a):
            succ = rng.choice(n_s, size=k, replace=False)
            p[s, a, succ] = rng.dirichlet(np.ones(k)) if k > 1 else 1.0
    # renormalise against float drift in dirichlet draws
    p /= p.sum(axis=2, keepdims=True)
    low, high = spec.reward_range
    r = rng.uniform(low, high, size=(n_s, n_a, n_s))
    terminal = np.zeros(n_s, dtype=bool)
    if spec.n_terminal:
        terminal[n_s - spec.n_terminal:] = True
        for s in np.flatnonzero(terminal):
            p[s] = 0.0
            p[s, :, s] = 1.0
            r[s] = 0.0
    rho = np.zeros(n_s)
    rho[: spec.n_start] = 1.0 / spec.n_start
    return FiniteMdp(p, r, spec.discount, rho, terminal)


# actions: up, right, down, left
GRID_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


def make_gridworld(
    width: int,
    height: int,
    goal: tuple | None = None,
    noise: float = 0.0,
    discount: float = 0.9,
    start: tuple = (0, 0),
) -> FiniteMdp:
    """Grid with a terminal goal paying 1 on arrival and 0 elsewhere.

    State index is ``y * width + x``. Moves into a wall leave the agent in
    place. With probability ``noise`` the move is replaced by one drawn
    uniformly from the four directions.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ValueError("grid needs at least two cells")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    goal = (width - 1, height - 1) if goal is None else tuple(goal)
    for x, y in (goal, start):
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"cell {(x, y)} lies outside the {width}x{height} grid")
    n_s = width * height
    g = goal[1] * width + goal[0]

    def move(s, a):
        x, y = s % width, s // width
        dx, dy = GRID_MOVES[a]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return ny * width + nx
        return s

    p = np.zeros((n_s, 4, n_s))
    r = np.zeros((n_s, 4, n_s))
    for s in range(n_s):
        for a in range(4):
            if s == g:
                p[s, a, s] = 1.0
                continue
            p[s, a, move(s, a)] += 1.0 - noise
            for b in range(4):
                p[s, a, move(s, b)] += noise / 4.0
            r[s, a, g] = 1.0
    terminal = np.zeros(n_s, dtype=bool)
    terminal[g] = True
    rho = np.zeros(n_s)
    rho[start[1] * width + start[0]] = 1.0
    return FiniteMdp(p, r, discount, rho, terminal)


# pendulum swing-up; constants follow the common gym definition
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0
PENDULUM_DT = 0.05
PENDULUM_G = 10.0
PENDULUM_M = 1.0
PENDULUM_L = 1.0
PENDULUM_HORIZON = 200
PENDULUM_MAX_COST = np.pi**2 + 0.1 * PENDULUM_MAX_SPEED**2 + 0.001 * PENDULUM_MAX_TORQUE**2


def angle_normalize(theta):
    return ((theta + np.pi) % (2 * np.pi)) - np.pi


def pendulum_dynamics(theta, thetadot, u):
    """One semi-implicit Euler step. Works elementwise on arrays.

    Returns ``(theta', thetadot', reward)`` with the reward computed from the
    pre-step state.
    """
    u = np.clip(u, -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    cost = angle_normalize(theta) ** 2 + 0.1 * thetadot**2 + 0.001 * u**2
    acc = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * np.sin(theta) + 3.0 / (PENDULUM_M * PENDULUM_L**2) * u
    thetadot = np.clip(thetadot + acc * PENDULUM_DT, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    theta = theta + thetadot * PENDULUM_DT
    return theta, thetadot, -cost


def pendulum_obs(theta, thetadot) -> np.ndarray:
    return np.stack([np.cos(theta), np.sin(theta), thetadot], axis=-1)


class PendulumEnv:
    """Continuous pendulum swing-up. ``terminated`` is always False."""

    env_id = "pendulum"
    state_dim = 3
    action_dim = 1
    max_action = PENDULUM_MAX_TORQUE
    horizon = PENDULUM_HORIZON
    reward_bound = PENDULUM_MAX_COST

    def __init__(self, horizon: int = PENDULUM_HORIZON):
        self.horizon = horizon
        self.theta = 0.0
        self.thetadot = 0.0
        self.t = 0
        self._rng = None

    def reset(self, rng=None, state=None) -> np.ndarray:
        if rng is not None or self._rng is None:
            self._rng = as_generator(rng)
        if state is None:
            self.theta = float(self._rng.uniform(-np.pi, np.pi))
            self.thetadot = float(self._rng.uniform(-1.0, 1.0))
        else:
            self.theta, self.thetadot = float(state[0]), float(state[1])
        self.t = 0
        return self.observation()

    def observation(self) -> np.ndarray:
        return pendulum_obs(self.theta, self.thetadot)

    def step(self, action):
        u = float(np.asarray(action, dtype=float).reshape(-1)[0])
        self.theta, self.thetadot, reward = pendulum_dynamics(self.theta, self.thetadot, u)
        self.theta, self.thetadot = float(self.theta), float(self.thetadot)
        self.t += 1
        truncated = self.t >= self.horizon
        return self.observation(), float(reward), False, truncated


def state_from_obs(obs: np.ndarray):
    """Recover (theta, thetadot) from pendulum observations."""
    obs = np.asarray(obs, dtype=float)
    return np.arctan2(obs[..., 1], obs[..., 0]), obs[..., 2]


def pendulum_step(env: PendulumEnv, u):
    return env.step(u)


_GRID_RE = re.compile(r"^gridworld:(\d+)x(\d+)$")
_RANDOM_RE = re.compile(r"^random-mdp:(\d+)$")

DEFAULT_HORIZON = {"two-state": 100, "gridworld": 100, "random-mdp": 100}


def make_env(env_id: str, discount: float | None = None):
    """Environment from its id string.

    Tabular ids yield a ``TabularEnv`` (its MDP at ``.mdp``); ``"pendulum"``
    yields a ``PendulumEnv``.
    """
    if env_id == "pendulum":
        return PendulumEnv()
    if env_id == "two-state":
        mdp = make_two_state(0.99 if discount is None else discount)
        return TabularEnv(mdp, horizon=DEFAULT_HORIZON["two-state"], env_id=env_id)
    m = _GRID_RE.match(env_id)
    if m:
        mdp = make_gridworld(int(m.group(1)), int(m.group(2)), discount=0.9 if discount is None else discount)
        return TabularEnv(mdp, horizon=None, env_id=env_id)
    m = _RANDOM_RE.match(env_id)
    if m:
        spec = RandomMdpSpec(8, 3, seed=int(m.group(1)), discount=0.9 if discount is None else discount, n_terminal=1)
        return TabularEnv(make_random_mdp(spec), horizon=DEFAULT_HORIZON["random-mdp"], env_id=env_id)
    raise ValueError(f"unknown environment id {env_id!r}")


def is_tabular(env_id: str) -> bool:
    return env_id != "pendulum"
