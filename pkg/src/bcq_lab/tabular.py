"""Sample-based tabular Q-learning and batch-constrained Q-learning (BCQL)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np

from bcq_lab.batch import Batch, _require_discrete
from bcq_lab.mdp import FiniteMdp, deterministic_policy, evaluate_policy_exact
from bcq_lab.rng import as_generator

TRACE_WINDOW = 1000
TRACE_HEADER = ("iteration", "max_delta", "q_norm")


@dataclass(frozen=True)
class LearningSchedule:
    """Per-(s, a) learning rate for the n-th visit of a pair.

    ``constant``: ``alpha0``. ``polynomial``: ``alpha0 / (1 + scale*(n-1))**exponent``,
    which is ``alpha0 / n**exponent`` at the default ``scale=1``. With exponent
    in (0.5, 1] it meets the Robbins-Monro conditions (sum alpha = inf,
    sum alpha^2 < inf). ``scale = 1 - gamma`` with exponent 1 gives the
    rescaled-linear schedule, which converges much faster for large gamma.
    """

    mode: str = "polynomial"
    alpha0: float = 1.0
    exponent: float = 0.8
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("constant", "polynomial"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "polynomial":
            if not 0.0 < self.alpha0 <= 1.0:
                raise ValueError("alpha0 must lie in (0, 1]")
            if not 0.5 < self.exponent <= 1.0:
                raise ValueError("exponent must lie in (0.5, 1]")
            if not self.scale > 0:
                raise ValueError("scale must be positive")
        elif not 0.0 <= self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in [0, 1]")

    def rate(self, n: int) -> float:
        """Learning rate for the ``n``-th visit (n >= 1)."""
        if self.mode == "constant":
            return self.alpha0
        return self.alpha0 / (1.0 + self.scale * (n - 1)) ** self.exponent

    @classmethod
    def rescaled_linear(cls, gamma: float) -> "LearningSchedule":
        return cls("polynomial", 1.0, 1.0, 1.0 - gamma)


@dataclass(frozen=True)
class TabularTrainConfig:
    iterations: int = 100_000
    schedule: LearningSchedule = field(default_factory=LearningSchedule)
    q_init: float = 0.0
    rng_seed: int = 0
    tol: float = 1e-6
    stop_on_convergence: bool = True
    sampling: str = "iid"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.sampling not in ("iid", "shuffle"):
            raise ValueError("sampling must be 'iid' or 'shuffle'")


def _check_transition(q, t):
    n_s, n_a = q.shape
    if not (0 <= t.s < n_s and 0 <= t.s_next < n_s and 0 <= t.a < n_a):
        raise IndexError(f"transition {t} outside a ({n_s}, {n_a}) table")


def q_learning_step(q: np.ndarray, t, alpha: float, gamma: float) -> np.ndarray:
    """In-place TD update toward r + gamma * max_a' Q(s', a'); zero bootstrap on terminals."""
    _check_transition(q, t)
    bootstrap = 0.0 if t.terminal else q[t.s_next].max()
    q[t.s, t.a] = (1.0 - alpha) * q[t.s, t.a] + alpha * (t.r + gamma * bootstrap)
    return q


def bcql_step(q: np.ndarray, t, alpha: float, gamma: float, batch_action_sets, q_init: float = 0.0) -> np.ndarray:
    """In-place BCQL update: the bootstrap max ranges over actions seen at s' in the batch.

    A non-terminal s' without batch actions bootstraps ``q_init``, the value
    the empirical MDP assigns to pairs routed to its absorbing state.
    """
    _check_transition(q, t)
    if t.terminal:
        bootstrap = 0.0
    else:
        allowed = batch_action_sets[t.s_next]
        bootstrap = q[t.s_next, allowed].max() if len(allowed) else q_init
    q[t.s, t.a] = (1.0 - alpha) * q[t.s, t.a] + alpha * (t.r + gamma * bootstrap)
    return q


@numba.njit(cache=True)
def _train_kernel(q, visits, s, a, r, sn, term, idx, polynomial, alpha0, omega, kappa, gamma,
                  constrained, act_ptr, act_idx, fallback, window, tol, stop, trace):
    """Run the sampled updates in ``idx``; returns (updates done, converged, violations)."""
    n_s, n_a = q.shape
    snapshot = q.copy()
    violations = 0
    n_windows = 0
    done = 0
    converged = False
    for k in range(idx.shape[0]):
        i = idx[k]
        st, at, sp = s[i], a[i], sn[i]
        visits[st, at] += 1
        if polynomial:
            alpha = alpha0 / (1.0 + kappa * (visits[st, at] - 1)) ** omega
        else:
            alpha = alpha0
        if term[i]:
            boot = 0.0
        elif constrained:
            lo, hi = act_ptr[sp], act_ptr[sp + 1]
            if hi == lo:
                boot = fallback[sp]
            else:
                best = act_idx[lo]
                boot = q[sp, best]
                for j in range(lo + 1, hi):
                    if q[sp, act_idx[j]] > boot:
                        boot = q[sp, act_idx[j]]
                        best = act_idx[j]
                # instrumentation: the chosen bootstrap action must be a batch action
                found = False
                for j in range(lo, hi):
                    if act_idx[j] == best:
                        found = True
                if not found:
                    violations += 1
        else:
            boot = q[sp, 0]
            for b in range(1, n_a):
                if q[sp, b] > boot:
                    boot = q[sp, b]
        q[st, at] = (1.0 - alpha) * q[st, at] + alpha * (r[i] + gamma * boot)
        done += 1
        if done % window == 0:
            delta = 0.0
            norm = 0.0
            for x in range(n_s):
                for y in range(n_a):
                    d = abs(q[x, y] - snapshot[x, y])
                    if d > delta:
                        delta = d
                    if abs(q[x, y]) > norm:
                        norm = abs(q[x, y])
                    snapshot[x, y] = q[x, y]
            trace[n_windows, 0] = delta
            trace[n_windows, 1] = norm
            n_windows += 1
            if delta < tol:
                converged = True
                if stop:
                    break
    return done, converged, violations


@dataclass
class TabularTrainResult:
    q: np.ndarray
    trace: list  # rows of (iteration, max_delta, q_norm)
    converged: bool
    iterations: int
    bootstrap_violations: int = 0
    visits: np.ndarray | None = None

    def write_trace_csv(self, path) -> None:
        write_trace_csv(self.trace, path)


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for it, delta, norm in trace:
            writer.writerow((int(it), repr(float(delta)), repr(float(norm))))


def _action_csr(batch: Batch):
    sets = batch.action_sets()
    ptr = np.zeros(len(sets) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(x) for x in sets])
    flat = np.concatenate(sets).astype(np.int64) if ptr[-1] else np.zeros(0, dtype=np.int64)
    return ptr, flat


def _draw_indices(rng, n, size, sampling):
    """Uniform transition indices: i.i.d. draws, or concatenated random permutations."""
    if sampling == "iid":
        return rng.integers(n, size=size)
    reps = -(-size // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:size]


def train_tabular(batch: Batch, config: TabularTrainConfig = TabularTrainConfig(), constrained: bool = False,
                  gamma: float | None = None, *, resume: TabularTrainResult | None = None,
                  rng=None) -> TabularTrainResult:
    """Q-learning (or BCQL when ``constrained``) from uniform samples of ``batch``.

    ``gamma`` defaults to ``batch.metadata['gamma']``. The trace holds the
    max-norm change of Q over each window of 1000 updates.

    Passing a previous result as ``resume`` continues from its Q table and
    visit counts (learning rates keep decaying); pass the same ``rng`` to
    continue one sampling stream across calls.
    """
    _require_discrete(batch)
    if len(batch) == 0:
        raise ValueError("cannot train on an empty batch")
    if gamma is None:
        gamma = batch.metadata.get("gamma")
        if gamma is None:
            raise ValueError("discount factor not given and not recorded in the batch metadata")
    n_s, n_a = batch.metadata["n_states"], batch.metadata["n_actions"]
    if resume is None:
        q = np.full((n_s, n_a), float(config.q_init))
        visits = np.zeros((n_s, n_a), dtype=np.int64)
    else:
        q, visits = resume.q.copy(), resume.visits.copy()
    ptr, flat = _action_csr(batch)
    fallback = np.full(n_s, float(config.q_init))
    rng = as_generator(config.rng_seed if rng is None else rng)
    sched = config.schedule
    trace = []
    done_total, converged, violations = 0, False, 0
    chunk = 100 * TRACE_WINDOW
    while done_total < config.iterations:
        size = min(chunk, config.iterations - done_total)
        idx = _draw_indices(rng, len(batch), size, config.sampling)
        buf = np.zeros((size // TRACE_WINDOW + 1, 2))
        done, conv, viol = _train_kernel(
            q, visits, batch.s, batch.a, batch.r, batch.s_next, batch.terminal, idx,
            sched.mode == "polynomial", float(sched.alpha0), float(sched.exponent), float(sched.scale), float(gamma),
            constrained, ptr, flat, fallback, TRACE_WINDOW, float(config.tol), config.stop_on_convergence, buf,
        )
        for w in range(done // TRACE_WINDOW):
            trace.append((done_total + (w + 1) * TRACE_WINDOW, float(buf[w, 0]), float(buf[w, 1])))
        done_total += done
        violations += viol
        converged = converged or conv
        if conv and config.stop_on_convergence:
            break
    return TabularTrainResult(q=q, trace=trace, converged=converged, iterations=done_total, bootstrap_violations=violations,
                             visits=visits)


class UncoveredStateError(LookupError):
    """The batch-constrained policy is undefined at a state absent from the batch."""


@dataclass
class BatchConstrainedPolicy:
    """Deterministic policy over the batch's source states.

    ``actions[s]`` is -1 for states without batch actions.
    """

    actions: np.ndarray
    n_actions: int

    UNCOVERED = -1

    @property
    def covered(self) -> np.ndarray:
        return self.actions != self.UNCOVERED

    @property
    def uncovered_states(self) -> list:
        return [int(s) for s in np.flatnonzero(~self.covered)]

    def action(self, state: int) -> int:
        a = int(self.actions[state])
        if a == self.UNCOVERED:
            raise UncoveredStateError(f"state {state} does not appear in the batch")
        return a

    def as_tabular(self, fill_action: int | None = None) -> np.ndarray:
        """Probability matrix. Uncovered states need an explicit ``fill_action``."""
        if not self.covered.all() and fill_action is None:
            raise UncoveredStateError(f"states {self.uncovered_states} are uncovered; pass fill_action")
        acts = np.where(self.covered, self.actions, fill_action if fill_action is not None else 0)
        return deterministic_policy(acts, self.n_actions)

    def evaluate(self, mdp: FiniteMdp, fill_action: int = 0) -> np.ndarray:
        """Exact Q on ``mdp``; rows of uncovered states are NaN."""
        q = evaluate_policy_exact(mdp, self.as_tabular(fill_action))
        q[~self.covered] = np.nan
        return q

    def state_value(self, mdp: FiniteMdp, state: int) -> float:
        a = self.action(state)
        return float(evaluate_policy_exact(mdp, self.as_tabular(fill_action=0))[state, a])


def extract_bcq_policy(q: np.ndarray, batch: Batch) -> BatchConstrainedPolicy:
    """argmax over batch actions at each state; lowest index wins ties."""
    _require_discrete(batch)
    acts = np.full(q.shape[0], BatchConstrainedPolicy.UNCOVERED, dtype=int)
    for s, allowed in enumerate(batch.action_sets()):
        if len(allowed):
            acts[s] = int(allowed[np.argmax(q[s, allowed])])
    return BatchConstrainedPolicy(actions=acts, n_actions=q.shape[1])
