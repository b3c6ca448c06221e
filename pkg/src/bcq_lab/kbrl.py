"""Kernel-based reinforcement learning over a fixed batch.

Q(s, a) is a normalised-kernel average of ``r + gamma * V(s'_B)`` over the
batch samples taken with action ``a``; V at each stored successor is the max
of Q over the actions the batch contains at that successor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bcq_lab.batch import Batch
from bcq_lab.envs import make_two_state, two_state_batch_transitions
from bcq_lab.mdp import deterministic_policy, evaluate_policy_exact
from bcq_lab.tabular import LearningSchedule, TabularTrainConfig, extract_bcq_policy, train_tabular


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth ``h`` and density ``phi``; the default is phi(x) = exp(-x^2)."""

    bandwidth: float = 1.0
    density: Callable | None = None

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def weights(self, query: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Normalised weights of ``points`` (n, d) for each query row (m, d) -> (m, n)."""
        dist = np.linalg.norm(query[:, None, :] - points[None, :, :], axis=2) / self.bandwidth
        if self.density is None:
            logk = -(dist**2)
            logk -= logk.max(axis=1, keepdims=True)
            k = np.exp(logk)
        else:
            k = np.asarray(self.density(dist), dtype=float)
            if np.any(k < 0):
                raise ValueError("density must be non-negative")
        total = k.sum(axis=1, keepdims=True)
        if np.any(total <= 0):
            raise ValueError("kernel weights vanish for some query; increase the bandwidth")
        return k / total


class MissingActionError(LookupError):
    """No batch sample exists for the requested action."""


@dataclass
class KbrlModel:
    states: np.ndarray  # (N, d) source states
    actions: np.ndarray  # (N,) discrete action labels
    rewards: np.ndarray
    next_index: np.ndarray  # (N,) row into successors
    terminal: np.ndarray
    successors: np.ndarray  # (M, d) unique stored successors
    discount: float
    kernel: KernelConfig = field(default_factory=KernelConfig)
    n_actions: int = 0
    values: np.ndarray = None  # V at each successor
    iterations: int = 0
    deltas: list = field(default_factory=list)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(len(self.successors))
        self._allowed = self._successor_actions()
        self._weights = {a: self.kernel.weights(self.successors, self.states[self.actions == a]) for a in self.sampled_actions}

    @property
    def sampled_actions(self) -> list:
        return sorted(int(a) for a in np.unique(self.actions))

    def _successor_actions(self):
        allowed = []
        for x in self.successors:
            match = np.all(self.states == x, axis=1)
            allowed.append(sorted({int(a) for a in self.actions[match]}))
        return allowed

    @classmethod
    def from_batch(cls, batch: Batch, discount: float, kernel: KernelConfig = KernelConfig(), embed=None) -> "KbrlModel":
        """Build from a batch; discrete states are embedded as scalar coordinates by default."""
        if batch.is_discrete:
            embed = embed or (lambda s: np.asarray(s, dtype=float)[:, None])
            s, sn = embed(batch.s), embed(batch.s_next)
            a = batch.a
            n_actions = batch.metadata["n_actions"]
        else:
            if batch.metadata["action_dim"] != 1:
                raise ValueError("KBRL needs discrete action labels")
            s, sn = batch.s, batch.s_next
            a = batch.a[:, 0].astype(int)
            n_actions = int(a.max()) + 1
        succ, inverse = np.unique(sn, axis=0, return_inverse=True)
        return cls(s, np.asarray(a, dtype=int), batch.r.copy(), inverse.reshape(-1), batch.terminal.copy(), succ,
                   float(discount), kernel, n_actions)

    def _targets(self, a: int, values: np.ndarray) -> np.ndarray:
        mask = self.actions == a
        boot = np.where(self.terminal[mask], 0.0, values[self.next_index[mask]])
        return self.rewards[mask] + self.discount * boot

    def successor_q(self, values: np.ndarray | None = None) -> np.ndarray:
        """Q at every stored successor for every sampled action, (M, n_actions); NaN if unsampled."""
        values = self.values if values is None else values
        out = np.full((len(self.successors), max(self.n_actions, 1)), np.nan)
        for a, w in self._weights.items():
            out[:, a] = w @ self._targets(a, values)
        return out

    def _successor_values(self, q: np.ndarray) -> np.ndarray:
        v = np.empty(len(self.successors))
        for i, allowed in enumerate(self._allowed):
            # a successor never used as a source falls back to all sampled actions
            row = q[i, allowed] if allowed else q[i, self.sampled_actions]
            v[i] = np.max(row)
        return v

    def q(self, s, a: int) -> float:
        a = int(a)
        if a not in self._weights:
            raise MissingActionError(f"action {a} has no samples in the batch")
        query = np.atleast_2d(np.asarray(s, dtype=float))
        w = self.kernel.weights(query, self.states[self.actions == a])
        return float(w[0] @ self._targets(a, self.values))

    def greedy_action(self, s) -> int:
        """argmax over every sampled action; lowest index wins ties."""
        return max(self.sampled_actions, key=lambda a: (self.q(s, a), -a))


def kbrl_q(model: KbrlModel, s, a: int) -> float:
    return model.q(s, a)


def kbrl_iterate(model: KbrlModel, tol: float = 1e-10, max_iters: int = 1_000_000) -> KbrlModel:
    """Alternate Q and V updates until the max change of V drops below ``tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    for it in range(1, max_iters + 1):
        new = model._successor_values(model.successor_q())
        delta = float(np.max(np.abs(new - model.values))) if len(new) else 0.0
        model.values = new
        model.iterations = it
        model.deltas.append(delta)
        if delta < tol:
            return model
    raise RuntimeError(f"KBRL did not converge within {max_iters} iterations (last change {delta:.3e})")


def two_state_demo(gamma: float = 0.99, bandwidth: float = 1.0, bcql_iterations: int = 200_000) -> dict:
    """KBRL versus BCQL on the two-state toy with the optimal-behaviour batch."""
    mdp = make_two_state(gamma)
    batch = Batch.discrete(two_state_batch_transitions(), 2, 2, env_id="two-state", policy_tag="optimal")
    model = kbrl_iterate(KbrlModel.from_batch(batch, gamma, KernelConfig(bandwidth)))
    q_kbrl = np.array([[model.q([s], a) for a in range(2)] for s in (0.0, 1.0)])
    kbrl_actions = [model.greedy_action([s]) for s in (0.0, 1.0)]
    kbrl_q_true = evaluate_policy_exact(mdp, deterministic_policy(kbrl_actions, 2))

    # deterministic transitions: alpha = 1 makes each update an exact backup
    cfg = TabularTrainConfig(iterations=bcql_iterations, schedule=LearningSchedule("constant", 1.0), rng_seed=0, tol=1e-12)
    bcql = train_tabular(batch, cfg, constrained=True, gamma=gamma)
    bcq_policy = extract_bcq_policy(bcql.q, batch)
    bcql_q_true = evaluate_policy_exact(mdp, bcq_policy.as_tabular())
    closed_form = {"q_s0_a1": 1.0 / (1.0 - gamma**2), "q_s1_a0": gamma / (1.0 - gamma**2)}
    return {
        "gamma": gamma,
        "kbrl_q": q_kbrl.tolist(),
        "kbrl_policy": kbrl_actions,
        "kbrl_return_s0": float(kbrl_q_true[0, kbrl_actions[0]]),
        "kbrl_iterations": model.iterations,
        "bcql_q": bcql.q.tolist(),
        "bcql_policy": [int(a) for a in bcq_policy.actions],
        "bcql_return_s0": float(bcql_q_true[0, bcq_policy.action(0)]),
        "closed_form": closed_form,
    }


def format_demo(report: dict) -> str:
    g = report["gamma"]
    lines = [
        f"two-state toy, gamma={g}",
        f"{'':8}{'Q(s0,a0)':>12}{'Q(s0,a1)':>12}{'Q(s1,a0)':>12}{'Q(s1,a1)':>12}{'policy':>10}{'return s0':>12}",
    ]
    for name, q, pol, ret in (
        ("KBRL", report["kbrl_q"], report["kbrl_policy"], report["kbrl_return_s0"]),
        ("BCQL", report["bcql_q"], report["bcql_policy"], report["bcql_return_s0"]),
    ):
        cells = "".join(f"{v:12.6f}" for v in np.ravel(q))
        lines.append(f"{name:8}{cells}{str(pol):>10}{ret:12.6f}")
    return "\n".join(lines)
