"""Finite MDPs and their exact solvers.

States and actions are integer indices. A policy is an ``(n_states,
n_actions)`` row-stochastic matrix and a Q table an ``(n_states, n_actions)``
float matrix; both are plain numpy arrays. Terminal states are zero-reward
self-loops and are never bootstrapped through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bcq_lab.rng import as_generator

ROW_SUM_TOL = 1e-12


class MdpError(ValueError):
    """Raised for malformed MDPs, policies or mismatched dimensions."""


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    transition: np.ndarray  # p[s, a, s']
    reward: np.ndarray  # r[s, a, s']
    discount: float
    initial_dist: np.ndarray
    terminal: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        rho = np.asarray(self.initial_dist, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise MdpError(f"transition must have shape (S, A, S), got {p.shape}")
        n_s = p.shape[0]
        term = np.zeros(n_s, dtype=bool) if self.terminal is None else np.asarray(self.terminal, dtype=bool)
        if r.shape != p.shape:
            raise MdpError(f"reward shape {r.shape} does not match transition shape {p.shape}")
        if rho.shape != (n_s,) or term.shape != (n_s,):
            raise MdpError("initial_dist and terminal must have one entry per state")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_SUM_TOL):
            raise MdpError("every transition row must be a probability distribution")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > ROW_SUM_TOL:
            raise MdpError("initial_dist must be a probability distribution")
        if not 0.0 <= self.discount < 1.0:
            raise MdpError(f"discount must lie in [0, 1), got {self.discount}")
        if not np.all(np.isfinite(r)):
            raise MdpError("rewards must be finite")
        for s in np.flatnonzero(term):
            if not (np.all(p[s, :, s] == 1.0) and np.all(r[s] == 0.0)):
                raise MdpError(f"terminal state {s} must be a zero-reward self-loop")
        for name, value in (("transition", p), ("reward", r), ("initial_dist", rho), ("terminal", term)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def expected_reward(self) -> np.ndarray:
        """r(s, a) = sum_s' p(s'|s,a) r(s,a,s')."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(self.transition.max(axis=2) == 1.0))

    def with_reward(self, reward: np.ndarray) -> "FiniteMdp":
        return FiniteMdp(self.transition, reward, self.discount, self.initial_dist, self.terminal)

    def with_discount(self, discount: float) -> "FiniteMdp":
        return FiniteMdp(self.transition, self.reward, discount, self.initial_dist, self.terminal)

    def __eq__(self, other):
        if not isinstance(other, FiniteMdp):
            return NotImplemented
        return (
            self.discount == other.discount
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.reward, other.reward)
            and np.array_equal(self.initial_dist, other.initial_dist)
            and np.array_equal(self.terminal, other.terminal)
        )

    __hash__ = None

    # serialization

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.discount,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal": self.terminal.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FiniteMdp":
        mdp = cls(
            transition=np.array(doc["transition"], dtype=float),
            reward=np.array(doc["reward"], dtype=float),
            discount=doc["gamma"],
            initial_dist=np.array(doc["initial_dist"], dtype=float),
            terminal=np.array(doc["terminal"], dtype=bool),
        )
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise MdpError("declared n_states/n_actions disagree with the tensors")
        return mdp

    def to_json(self) -> str:
        # float repr is the shortest string that round-trips bit-exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FiniteMdp":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FiniteMdp":
        return cls.from_json(Path(path).read_text())


def check_policy(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise MdpError(f"policy shape {policy.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise MdpError("policy rows must be probability distributions")
    return policy


def _check_q(mdp: FiniteMdp, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise MdpError(f"Q shape {q.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")
    return q


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    """One-hot policy matrix from a vector of action indices."""
    actions = np.asarray(actions, dtype=int)
    probs = np.zeros((actions.size, n_actions))
    probs[np.arange(actions.size), actions] = 1.0
    return probs


def uniform_policy(mdp: FiniteMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def bellman_backup(mdp: FiniteMdp, q: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """Apply the policy Bellman operator once to ``q``."""
    q = _check_q(mdp, q)
    policy = check_policy(mdp, policy)
    v_next = np.where(mdp.terminal, 0.0, (policy * q).sum(axis=1))
    return mdp.expected_reward + mdp.discount * mdp.transition @ v_next


def _bootstrap_values(mdp: FiniteMdp, v: np.ndarray) -> np.ndarray:
    return mdp.expected_reward + mdp.discount * mdp.transition @ np.where(mdp.terminal, 0.0, v)


def state_transition_matrix(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) p(s'|s,a)."""
    return np.einsum("ij,ijk->ik", policy, mdp.transition)


def evaluate_policy_exact(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """Q^pi by a direct solve of the |S|-dimensional state-value system."""
    policy = check_policy(mdp, policy)
    p_pi = state_transition_matrix(mdp, policy) * ~mdp.terminal[None, :]
    r_pi = (policy * mdp.expected_reward).sum(axis=1)
    system = np.eye(mdp.n_states) - mdp.discount * p_pi
    try:
        v = np.linalg.solve(system, r_pi)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(system)
        raise RuntimeError(f"policy evaluation system is singular (cond={cond:.3e}, gamma={mdp.discount})") from exc
    return _bootstrap_values(mdp, v)


def optimality_residual(mdp: FiniteMdp, q: np.ndarray) -> float:
    """max |T* q - q|."""
    return float(np.max(np.abs(_bootstrap_values(mdp, q.max(axis=1)) - q)))


@dataclass
class ValueIterationResult:
    q: np.ndarray
    converged: bool
    iterations: int
    residual: float

    @property
    def policy(self) -> np.ndarray:
        return greedy_policy(self.q)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iters: int = 100_000) -> ValueIterationResult:
    """Optimal Q by value iteration, polished with one exact policy evaluation.

    The polish replaces the iterate with Q of its greedy policy whenever that
    lowers the optimality residual, which makes the result exact once the
    greedy policy has stabilised.
    """
    if tol <= 0:
        raise MdpError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    residual = np.inf
    iterations = 0
    while iterations < max_iters:
        q_new = _bootstrap_values(mdp, q.max(axis=1))
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        iterations += 1
        if residual < tol:
            break
    residual = optimality_residual(mdp, q)
    polished = evaluate_policy_exact(mdp, greedy_policy(q))
    polished_residual = optimality_residual(mdp, polished)
    if polished_residual <= residual:
        q, residual = polished, polished_residual
    return ValueIterationResult(q=q, converged=residual < tol, iterations=iterations, residual=residual)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic argmax policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    return deterministic_policy(np.argmax(q, axis=1), q.shape[1])


def reachable_states(mdp: FiniteMdp, policy: np.ndarray, start=None) -> np.ndarray:
    """Boolean mask of states reachable from ``start`` (default: support of rho0)."""
    policy = check_policy(mdp, policy)
    adjacency = state_transition_matrix(mdp, policy) > 0
    if start is None:
        frontier = list(np.flatnonzero(mdp.initial_dist > 0))
    else:
        frontier = list(np.atleast_1d(start))
    seen = np.zeros(mdp.n_states, dtype=bool)
    seen[frontier] = True
    while frontier:
        s = frontier.pop()
        for s_next in np.flatnonzero(adjacency[s] & ~seen):
            seen[s_next] = True
            frontier.append(s_next)
    return seen


def occupancy(mdp: FiniteMdp, policy: np.ndarray) -> np.ndarray:
    """Normalised discounted state occupancy (1 - g) sum_t g^t Pr(s_t = s).

    Entries outside the reachable set are exactly zero.
    """
    policy = check_policy(mdp, policy)
    p_pi = state_transition_matrix(mdp, policy)
    system = np.eye(mdp.n_states) - mdp.discount * p_pi.T
    mu = (1.0 - mdp.discount) * np.linalg.solve(system, mdp.initial_dist)
    mu = np.where(reachable_states(mdp, policy), np.clip(mu, 0.0, None), 0.0)
    return mu / mu.sum()


class TabularEnv:
    """Episodic simulator of a FiniteMdp with the env step interface."""

    def __init__(self, mdp: FiniteMdp, horizon: int | None = None, env_id: str = "finite-mdp"):
        self.mdp = mdp
        self.horizon = horizon
        self.env_id = env_id
        self.state = None
        self.t = 0
        self._rng = None
        self._cdf = np.cumsum(mdp.transition, axis=2)

    n_states = property(lambda self: self.mdp.n_states)
    n_actions = property(lambda self: self.mdp.n_actions)

    def reset(self, rng=None, state: int | None = None) -> int:
        self._rng = as_generator(rng) if rng is not None or self._rng is None else self._rng
        if state is None:
            state = int(self._rng.choice(self.mdp.n_states, p=self.mdp.initial_dist))
        self.state = int(state)
        self.t = 0
        return self.state

    def step(self, action: int):
        s, a = self.state, int(action)
        s_next = int(np.searchsorted(self._cdf[s, a], self._rng.random(), side="right"))
        s_next = min(s_next, self.mdp.n_states - 1)
        reward = float(self.mdp.reward[s, a, s_next])
        self.state = s_next
        self.t += 1
        terminated = bool(self.mdp.terminal[s_next])
        truncated = self.horizon is not None and self.t >= self.horizon and not terminated
        return s_next, reward, terminated, truncated


@dataclass
class McEstimate:
    mean: float
    stderr: float
    returns: np.ndarray = field(repr=False)


def _mc_tabular(mdp, policy, n_episodes, horizon, rng, start_state, start_action):
    policy = check_policy(mdp, policy)
    n = n_episodes
    if start_state is None:
        states = rng.choice(mdp.n_states, size=n, p=mdp.initial_dist)
    else:
        states = np.full(n, int(start_state))
    p_cdf = np.cumsum(mdp.transition, axis=2)
    pi_cdf = np.cumsum(policy, axis=1)
    returns = np.zeros(n)
    alive = ~mdp.terminal[states]
    scale = 1.0
    for t in range(horizon):
        if not alive.any():
            break
        if t == 0 and start_action is not None:
            actions = np.full(n, int(start_action))
        else:
            actions = (rng.random(n)[:, None] >= pi_cdf[states]).sum(axis=1)
            actions = np.minimum(actions, mdp.n_actions - 1)
        nxt = (rng.random(n)[:, None] >= p_cdf[states, actions]).sum(axis=1)
        nxt = np.minimum(nxt, mdp.n_states - 1)
        returns += np.where(alive, scale * mdp.reward[states, actions, nxt], 0.0)
        scale *= mdp.discount
        states = nxt
        alive &= ~mdp.terminal[states]
    return returns


def _mc_env(env, policy, n_episodes, horizon, rng, discount):
    returns = np.zeros(n_episodes)
    for i in range(n_episodes):
        obs = env.reset(rng)
        total, scale = 0.0, 1.0
        for _ in range(horizon):
            obs, reward, terminated, truncated = env.step(policy(obs))
            total += scale * reward
            scale *= discount
            if terminated or truncated:
                break
        returns[i] = total
    return returns


def mc_return(
    env_or_mdp,
    policy,
    n_episodes: int,
    horizon: int,
    rng_seed=None,
    *,
    discount: float | None = None,
    start_state: int | None = None,
    start_action: int | None = None,
) -> McEstimate:
    """Monte-Carlo estimate of the discounted return sum_t g^t r_t.

    ``env_or_mdp`` is either a FiniteMdp (``policy`` a probability matrix,
    episodes simulated in parallel) or an environment with ``reset(rng)`` and
    ``step(action)`` (``policy`` a callable from observation to action).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    rng = as_generator(rng_seed)
    if isinstance(env_or_mdp, FiniteMdp):
        returns = _mc_tabular(env_or_mdp, policy, n_episodes, horizon, rng, start_state, start_action)
    else:
        if discount is None:
            raise ValueError("discount is required for environment rollouts")
        returns = _mc_env(env_or_mdp, policy, n_episodes, horizon, rng, discount)
    spread = n_episodes > 1 and np.ptp(returns) > 0
    stderr = float(returns.std(ddof=1) / np.sqrt(n_episodes)) if spread else 0.0
    return McEstimate(mean=float(returns.mean()), stderr=stderr, returns=returns)
