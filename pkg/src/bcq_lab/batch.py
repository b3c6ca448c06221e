"""Fixed batches of transitions and the objects derived from them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from bcq_lab.mdp import FiniteMdp, TabularEnv, check_policy, reachable_states
from bcq_lab.rng import as_generator

FORMAT_NAME = "bcq-lab-batch"
FORMAT_VERSION = 1


class DiscreteTransition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    terminal: bool
    truncated: bool = False


class ContinuousTransition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool
    truncated: bool = False


class BatchFormatError(ValueError):
    """Malformed batch file. ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class Verdict(NamedTuple):
    """Boolean answer with a counterexample when false."""

    ok: bool
    witness: object = None

    def __bool__(self):
        return self.ok


@dataclass
class Batch:
    """An immutable, homogeneous sequence of transitions plus metadata.

    Discrete batches store ``s``, ``a``, ``s_next`` as int vectors; continuous
    ones store ``(N, dim)`` float matrices. ``metadata`` always carries
    ``kind``, ``env_id``, ``state_dim``, ``action_dim``, ``policy_tag`` and
    ``seed``.
    """

    metadata: dict
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray = None
    _action_sets: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        kind = self.metadata.get("kind")
        if kind not in ("discrete", "continuous"):
            raise ValueError("metadata['kind'] must be 'discrete' or 'continuous'")
        dtype = int if kind == "discrete" else float
        n = len(self.r)
        self.s = np.asarray(self.s, dtype=dtype)
        self.a = np.asarray(self.a, dtype=dtype)
        self.s_next = np.asarray(self.s_next, dtype=dtype)
        self.r = np.asarray(self.r, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.truncated = np.zeros(n, dtype=bool) if self.truncated is None else np.asarray(self.truncated, dtype=bool)
        if kind == "continuous":
            self.s = self.s.reshape(n, self.metadata["state_dim"])
            self.a = self.a.reshape(n, self.metadata["action_dim"])
            self.s_next = self.s_next.reshape(n, self.metadata["state_dim"])
        for name in ("s", "a", "s_next", "terminal", "truncated"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has the wrong length")
        if np.any(self.terminal & self.truncated):
            raise ValueError("a transition cannot be both terminal and truncated")
        if kind == "discrete" and n:
            n_s, n_a = self.metadata["n_states"], self.metadata["n_actions"]
            if min(self.s.min(), self.s_next.min(), self.a.min()) < 0 or max(self.s.max(), self.s_next.max()) >= n_s or self.a.max() >= n_a:
                raise ValueError("transition indices outside the declared MDP dimensions")
        for name in ("s", "a", "r", "s_next", "terminal", "truncated"):
            getattr(self, name).setflags(write=False)

    @property
    def kind(self) -> str:
        return self.metadata["kind"]

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i: int):
        cls = DiscreteTransition if self.is_discrete else ContinuousTransition
        if self.is_discrete:
            return cls(int(self.s[i]), int(self.a[i]), float(self.r[i]), int(self.s_next[i]), bool(self.terminal[i]), bool(self.truncated[i]))
        return cls(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.terminal[i]), bool(self.truncated[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, Batch):
            return NotImplemented
        return self.metadata == other.metadata and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("s", "a", "r", "s_next", "terminal", "truncated")
        )

    @classmethod
    def from_transitions(cls, transitions, metadata: dict) -> "Batch":
        rows = list(transitions)
        cols = list(zip(*rows)) if rows else [[] for _ in range(6)]
        truncated = cols[5] if len(cols) > 5 else None
        return cls(dict(metadata), cols[0], cols[1], cols[2], cols[3], cols[4], truncated)

    @classmethod
    def discrete(cls, transitions, n_states: int, n_actions: int, env_id: str = "finite-mdp", policy_tag: str = "manual", seed=None):
        meta = dict(kind="discrete", env_id=env_id, state_dim=1, action_dim=1, n_states=n_states, n_actions=n_actions, policy_tag=policy_tag, seed=seed)
        return cls.from_transitions(transitions, meta)

    @classmethod
    def continuous(cls, s, a, r, s_next, terminal, truncated=None, env_id: str = "custom", policy_tag: str = "manual", seed=None):
        s, a = np.atleast_2d(s), np.atleast_2d(a)
        meta = dict(kind="continuous", env_id=env_id, state_dim=s.shape[1], action_dim=a.shape[1], policy_tag=policy_tag, seed=seed)
        return cls(meta, s, a, r, s_next, terminal, truncated)

    def with_transitions(self, index) -> "Batch":
        """Sub-batch (or reordered batch) sharing the metadata."""
        return Batch(dict(self.metadata), self.s[index], self.a[index], self.r[index], self.s_next[index], self.terminal[index], self.truncated[index])

    def concat(self, other: "Batch") -> "Batch":
        return Batch(
            dict(self.metadata),
            *(np.concatenate([getattr(self, k), getattr(other, k)]) for k in ("s", "a", "r", "s_next", "terminal", "truncated")),
        )

    def action_sets(self) -> list:
        """Per-state sorted array of actions present in the batch (discrete only)."""
        _require_discrete(self)
        if self._action_sets is None:
            seen = self.pair_mask()
            self._action_sets = [np.flatnonzero(row) for row in seen]
        return self._action_sets

    def pair_mask(self) -> np.ndarray:
        _require_discrete(self)
        seen = np.zeros((self.metadata["n_states"], self.metadata["n_actions"]), dtype=bool)
        seen[self.s, self.a] = True
        return seen

    def source_states(self) -> np.ndarray:
        _require_discrete(self)
        mask = np.zeros(self.metadata["n_states"], dtype=bool)
        mask[self.s] = True
        return mask

    def episode_returns(self) -> np.ndarray:
        """Undiscounted returns of the complete episodes stored in order."""
        ends = np.flatnonzero(self.terminal | self.truncated)
        out, start = [], 0
        for end in ends:
            out.append(float(self.r[start:end + 1].sum()))
            start = end + 1
        return np.array(out)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in ("s", "a", "r", "s_next", "terminal", "truncated"):
            h.update(np.ascontiguousarray(getattr(self, k)).tobytes())
        return h.hexdigest()

    # serialization

    def to_jsonl(self) -> str:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "metadata": self.metadata, "n": len(self)}
        lines = [json.dumps(header, sort_keys=True)]
        for t in self:
            row = {
                "s": _plain(t.s),
                "a": _plain(t.a),
                "r": t.r,
                "s_next": _plain(t.s_next),
                "terminal": t.terminal,
                "truncated": t.truncated,
            }
            lines.append(json.dumps(row))
        return "\n".join(lines) + "\n"


def _plain(x):
    return x.tolist() if isinstance(x, np.ndarray) else x


def _require_discrete(batch: Batch):
    if not batch.is_discrete:
        raise ValueError("operation requires a discrete batch")


def save_batch(batch: Batch, path) -> None:
    Path(path).write_text(batch.to_jsonl())


def parse_batch(data: bytes) -> Batch:
    """Parse the JSON-lines batch format, reporting faults by byte offset."""
    offset = 0
    rows = []
    header = None
    for line in data.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            try:
                doc = json.loads(stripped)
            except json.JSONDecodeError as exc:
                lead = len(line) - len(line.lstrip())
                raise BatchFormatError(f"invalid JSON: {exc.msg}", offset + lead + exc.pos) from None
            except UnicodeDecodeError:
                raise BatchFormatError("line is not valid UTF-8", offset) from None
            if header is None:
                if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
                    raise BatchFormatError("missing batch header", offset)
                if doc.get("version") != FORMAT_VERSION:
                    raise BatchFormatError(f"unsupported batch version {doc.get('version')!r}", offset)
                header = doc
            else:
                if not isinstance(doc, dict) or not {"s", "a", "r", "s_next", "terminal"} <= doc.keys():
                    raise BatchFormatError("transition record lacks required fields", offset)
                rows.append(doc)
        offset += len(line)
    if header is None:
        raise BatchFormatError("empty batch file", 0)
    if header.get("n") != len(rows):
        raise BatchFormatError(f"header declares {header.get('n')} transitions, found {len(rows)}", offset)
    meta = header["metadata"]
    transitions = [(d["s"], d["a"], d["r"], d["s_next"], d["terminal"], d.get("truncated", False)) for d in rows]
    if meta.get("kind") == "continuous" and not transitions:
        return Batch(meta, np.zeros((0, meta["state_dim"])), np.zeros((0, meta["action_dim"])), [], np.zeros((0, meta["state_dim"])), [], [])
    try:
        return Batch.from_transitions(transitions, meta)
    except (ValueError, KeyError, TypeError) as exc:
        raise BatchFormatError(f"inconsistent batch contents: {exc}", offset) from None


def load_batch(path) -> Batch:
    return parse_batch(Path(path).read_bytes())


def sample_uniform(batch: Batch, rng=None):
    """One transition drawn uniformly at random."""
    if len(batch) == 0:
        raise ValueError("cannot sample from an empty batch")
    return batch[int(as_generator(rng).integers(len(batch)))]


def sample_indices(batch: Batch, size: int, rng) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("cannot sample from an empty batch")
    return rng.integers(len(batch), size=size)


# collection


def _tabular_action(policy, state, rng, n_actions):
    if callable(policy):
        return int(policy(state, rng))
    probs = np.asarray(policy)[state]
    return int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), n_actions - 1))


def collect_batch(
    env,
    behavior_policy,
    n_steps: int,
    noise_sigma: float = 0.0,
    random_action_prob: float = 0.0,
    rng_seed=None,
    policy_tag: str = "behavioral",
) -> Batch:
    """Roll episodes of ``behavior_policy`` and store exactly ``n_steps`` transitions.

    For a ``TabularEnv`` the policy is a probability matrix or a callable
    ``(state, rng) -> action``. For continuous environments it is a callable
    ``obs -> action`` or ``None`` for uniform-random actions; zero-mean
    Gaussian noise with standard deviation ``noise_sigma * max_action`` is
    added and the result clipped to the action bounds. With probability
    ``random_action_prob`` the action is replaced by a uniform draw.
    Horizon ends set ``truncated``, never ``terminal``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if not 0.0 <= random_action_prob <= 1.0:
        raise ValueError("random_action_prob must lie in [0, 1]")
    rng = as_generator(rng_seed)
    seed = rng_seed if isinstance(rng_seed, (int, np.integer)) else None
    if isinstance(env, TabularEnv):
        if noise_sigma > 0:
            raise ValueError("Gaussian action noise is undefined for discrete actions")
        return _collect_tabular(env, behavior_policy, n_steps, random_action_prob, rng, policy_tag, seed)
    return _collect_continuous(env, behavior_policy, n_steps, noise_sigma, random_action_prob, rng, policy_tag, seed)


def _collect_tabular(env, policy, n_steps, eps, rng, tag, seed):
    rows = []
    n_random = 0
    s = env.reset(rng)
    while len(rows) < n_steps:
        if eps > 0 and rng.random() < eps:
            a = int(rng.integers(env.n_actions))
            n_random += 1
        else:
            a = _tabular_action(policy, s, rng, env.n_actions)
        s_next, r, terminated, truncated = env.step(a)
        rows.append((s, a, r, s_next, terminated, truncated))
        s = env.reset() if (terminated or truncated) else s_next
    meta = dict(kind="discrete", env_id=env.env_id, state_dim=1, action_dim=1, n_states=env.n_states,
                n_actions=env.n_actions, policy_tag=tag, seed=seed, n_random_actions=n_random)
    return Batch.from_transitions(rows, meta)


def _collect_continuous(env, policy, n_steps, sigma, eps, rng, tag, seed):
    max_action = env.max_action
    s_buf = np.zeros((n_steps, env.state_dim))
    a_buf = np.zeros((n_steps, env.action_dim))
    sn_buf = np.zeros((n_steps, env.state_dim))
    r_buf = np.zeros(n_steps)
    term = np.zeros(n_steps, dtype=bool)
    trunc = np.zeros(n_steps, dtype=bool)
    n_random = 0
    obs = env.reset(rng)
    for i in range(n_steps):
        if policy is None or (eps > 0 and rng.random() < eps):
            a = rng.uniform(-max_action, max_action, size=env.action_dim)
            n_random += policy is not None
        else:
            a = np.asarray(policy(obs), dtype=float).reshape(env.action_dim)
            if sigma > 0:
                a = a + rng.normal(0.0, sigma * max_action, size=env.action_dim)
            a = np.clip(a, -max_action, max_action)
        obs_next, r, terminated, truncated = env.step(a)
        s_buf[i], a_buf[i], sn_buf[i], r_buf[i] = obs, a, obs_next, r
        term[i], trunc[i] = terminated, truncated and not terminated
        obs = env.reset() if (terminated or truncated) else obs_next
    meta = dict(kind="continuous", env_id=env.env_id, state_dim=env.state_dim, action_dim=env.action_dim,
                max_action=max_action, policy_tag="uniform-random" if policy is None else tag, seed=seed,
                n_random_actions=n_random)
    return Batch(meta, s_buf, a_buf, r_buf, sn_buf, term, trunc)


def trim_incomplete_episode(batch: Batch) -> Batch:
    """Drop trailing transitions after the last terminal or truncation."""
    ends = np.flatnonzero(batch.terminal | batch.truncated)
    if len(ends) == 0:
        return batch
    return batch.with_transitions(slice(0, ends[-1] + 1))


# empirical MDP


@dataclass
class EmpiricalMdp:
    """The MDP induced by a batch's transition counts.

    State ``n_states`` (index ``s_init``) is an extra absorbing terminal
    state. Pairs never observed route to it with reward ``q_init[s, a]``.
    Terminal states of the base MDP keep their zero-reward self-loops.
    """

    base: FiniteMdp
    counts: np.ndarray
    q_init: np.ndarray

    @property
    def n_states(self) -> int:
        return self.base.n_states

    @property
    def n_actions(self) -> int:
        return self.base.n_actions

    @property
    def s_init(self) -> int:
        return self.base.n_states

    @property
    def seen(self) -> np.ndarray:
        return self.counts.sum(axis=2) > 0

    @property
    def p_b(self) -> np.ndarray:
        """p_B(s'|s,a) over the augmented state space, shape (S, A, S+1)."""
        n_s, n_a = self.n_states, self.n_actions
        p = np.zeros((n_s, n_a, n_s + 1))
        totals = self.counts.sum(axis=2)
        seen = totals > 0
        p[:, :, :n_s][seen] = self.counts[seen] / totals[seen][:, None]
        p[~seen, n_s] = 1.0
        term = self.base.terminal
        p[term] = 0.0
        p[term, :, np.flatnonzero(term)] = 1.0
        return p

    def to_finite_mdp(self) -> FiniteMdp:
        n_s, n_a = self.n_states, self.n_actions
        p = np.zeros((n_s + 1, n_a, n_s + 1))
        p[:n_s] = self.p_b
        p[n_s, :, n_s] = 1.0
        r = np.zeros((n_s + 1, n_a, n_s + 1))
        r[:n_s, :, :n_s] = self.base.reward
        r[:n_s, :, n_s] = np.where(self.base.terminal[:, None], 0.0, self.q_init)
        rho = np.append(self.base.initial_dist, 0.0)
        terminal = np.append(self.base.terminal, True)
        return FiniteMdp(p, r, self.base.discount, rho, terminal)


def empirical_mdp(batch: Batch, base: FiniteMdp, q_init=0.0) -> EmpiricalMdp:
    """Count-based MDP of a discrete batch. ``q_init`` is a scalar or an (S, A) table."""
    _require_discrete(batch)
    if (batch.metadata["n_states"], batch.metadata["n_actions"]) != (base.n_states, base.n_actions):
        raise ValueError("batch dimensions do not match the base MDP")
    counts = np.zeros((base.n_states, base.n_actions, base.n_states), dtype=np.int64)
    np.add.at(counts, (batch.s, batch.a, batch.s_next), 1)
    q0 = np.broadcast_to(np.asarray(q_init, dtype=float), (base.n_states, base.n_actions)).copy()
    return EmpiricalMdp(base=base, counts=counts, q_init=q0)


# batch predicates


def is_coherent(batch: Batch) -> Verdict:
    """Every non-terminal successor must also appear as a source state."""
    _require_discrete(batch)
    sources = batch.source_states()
    bad = np.flatnonzero(~batch.terminal & ~sources[batch.s_next])
    if len(bad):
        return Verdict(False, batch[int(bad[0])])
    return Verdict(True)


def is_batch_constrained(policy: np.ndarray, batch: Batch, mdp: FiniteMdp) -> Verdict:
    """Every reachable, non-terminal (s, a) with pi(a|s) > 0 must be in the batch.

    The witness is the first offending ``(s, a)`` pair.
    """
    _require_discrete(batch)
    policy = check_policy(mdp, policy)
    supported = reachable_states(mdp, policy) & ~mdp.terminal
    seen = batch.pair_mask()
    missing = supported[:, None] & (policy > 0) & ~seen
    if missing.any():
        s, a = np.argwhere(missing)[0]
        return Verdict(False, (int(s), int(a)))
    return Verdict(True)
