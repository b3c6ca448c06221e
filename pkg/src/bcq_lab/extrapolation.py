"""Exact extrapolation error between a true MDP and a batch's empirical MDP.

``eps(s, a) = Q^pi(s, a) - Q^pi_B(s, a)`` where ``Q^pi`` is exact on the true
MDP and ``Q^pi_B`` exact on the empirical MDP. Unseen pairs take their
empirical value through the absorbing state, so the table is defined
everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from bcq_lab.batch import EmpiricalMdp
from bcq_lab.mdp import FiniteMdp, check_policy, evaluate_policy_exact, occupancy, reachable_states

MAX_SWEEPS = 1_000_000
WARN_SWEEPS = 100_000


def _check_pair(mdp: FiniteMdp, emp: EmpiricalMdp, policy) -> np.ndarray:
    if (emp.n_states, emp.n_actions) != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"empirical MDP is ({emp.n_states}, {emp.n_actions}) but the true MDP is ({mdp.n_states}, {mdp.n_actions})"
        )
    return check_policy(mdp, policy)


def _extend_policy(policy: np.ndarray) -> np.ndarray:
    # the absorbing state's action choice never matters
    return np.vstack([policy, np.full(policy.shape[1], 1.0 / policy.shape[1])])


def batch_q(emp: EmpiricalMdp, policy: np.ndarray) -> np.ndarray:
    """Q^pi_B on the original states."""
    return evaluate_policy_exact(emp.to_finite_mdp(), _extend_policy(policy))[: emp.n_states]


def epsilon_direct(mdp: FiniteMdp, emp: EmpiricalMdp, policy: np.ndarray) -> np.ndarray:
    policy = _check_pair(mdp, emp, policy)
    return evaluate_policy_exact(mdp, policy) - batch_q(emp, policy)


@dataclass
class EpsilonResult:
    values: np.ndarray
    converged: bool
    sweeps: int


def epsilon_bellman(mdp: FiniteMdp, emp: EmpiricalMdp, policy: np.ndarray, tol: float = 1e-11,
                    max_sweeps: int = MAX_SWEEPS) -> EpsilonResult:
    """Extrapolation error as the fixed point of its own Bellman-like recursion.

    eps = sum_s' (p_M - p_B)(r + g sum_a' pi Q_B(s', a')) + g sum_s' p_M sum_a' pi eps(s', a')

    Iteration stops once the contraction bound g/(1-g)*|delta| drops below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    policy = _check_pair(mdp, emp, policy)
    n_s, g = mdp.n_states, mdp.discount
    ext = emp.to_finite_mdp()
    q_b = evaluate_policy_exact(ext, _extend_policy(policy))
    v_b = np.where(ext.terminal, 0.0, (_extend_policy(policy) * q_b).sum(axis=1))
    p_m = np.zeros((n_s, mdp.n_actions, n_s + 1))
    p_m[:, :, :n_s] = mdp.transition
    p_b = ext.transition[:n_s]
    r = ext.reward[:n_s]
    source = np.einsum("ijk,ijk->ij", p_m - p_b, r + g * v_b[None, None, :])
    p_cont = mdp.transition * ~mdp.terminal[None, None, :]
    eps = np.zeros((n_s, mdp.n_actions))
    factor = g / (1.0 - g) if g > 0 else 0.0
    for sweep in range(1, max_sweeps + 1):
        if sweep == WARN_SWEEPS:
            warnings.warn(f"epsilon recursion still running after {WARN_SWEEPS} sweeps", RuntimeWarning)
        new = source + g * p_cont @ (policy * eps).sum(axis=1)
        delta = float(np.max(np.abs(new - eps)))
        eps = new
        if factor * delta < tol:
            return EpsilonResult(eps, True, sweep)
    return EpsilonResult(eps, False, max_sweeps)


def epsilon_aggregate(eps: np.ndarray, policy: np.ndarray, mu: np.ndarray) -> float:
    """sum_s mu(s) sum_a pi(a|s) |eps(s, a)|."""
    eps, policy, mu = np.asarray(eps), np.asarray(policy), np.asarray(mu)
    if eps.shape != policy.shape or mu.shape != (eps.shape[0],):
        raise ValueError("eps, policy and mu dimensions disagree")
    return float(mu @ (policy * np.abs(eps)).sum(axis=1))


@dataclass
class Lemma1Result:
    holds: bool
    max_divergence: float
    worst_pair: tuple | None

    def __bool__(self):
        return self.holds


def check_lemma1(mdp: FiniteMdp, emp: EmpiricalMdp, policy: np.ndarray, atol: float = 1e-12) -> Lemma1Result:
    """Do p_B and p_M agree on every (s, a) with mu(s) > 0 and pi(a|s) > 0?"""
    policy = _check_pair(mdp, emp, policy)
    n_s = mdp.n_states
    p_m = np.zeros((n_s, mdp.n_actions, n_s + 1))
    p_m[:, :, :n_s] = mdp.transition
    div = np.abs(p_m - emp.p_b).max(axis=2)
    supported = reachable_states(mdp, policy)[:, None] & (policy > 0)
    if not supported.any():
        return Lemma1Result(True, 0.0, None)
    masked = np.where(supported, div, -1.0)
    s, a = np.unravel_index(int(np.argmax(masked)), masked.shape)
    worst = float(masked[s, a])
    return Lemma1Result(worst <= atol, worst, (int(s), int(a)))


def extrapolation_report(mdp: FiniteMdp, emp: EmpiricalMdp, policy: np.ndarray) -> dict:
    """Per-pair error, aggregate, exact-recovery verdict and divergence heat data."""
    policy = _check_pair(mdp, emp, policy)
    eps = epsilon_direct(mdp, emp, policy)
    mu = occupancy(mdp, policy)
    lemma = check_lemma1(mdp, emp, policy)
    n_s = mdp.n_states
    p_m = np.zeros((n_s, mdp.n_actions, n_s + 1))
    p_m[:, :, :n_s] = mdp.transition
    return {
        "epsilon": eps.tolist(),
        "aggregate": epsilon_aggregate(eps, policy, mu),
        "occupancy": mu.tolist(),
        "lemma1": {"holds": lemma.holds, "max_divergence": lemma.max_divergence, "worst_pair": lemma.worst_pair},
        "divergence": np.abs(p_m - emp.p_b).max(axis=2).tolist(),
        "seen": emp.seen.tolist(),
    }
