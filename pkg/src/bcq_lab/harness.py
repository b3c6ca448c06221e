"""Experiment orchestration: batch scenarios, training loops, evaluation, metric files.

Run directories follow ``<out>/<scenario>/<agent>/<seed>/`` and contain

- ``config.txt``: the resolved configuration,
- ``batch.jsonl``: the training batch,
- ``metrics.csv`` and ``metrics.json``: one record per evaluation,
- ``summary.json``: batch statistics and the training env-step count,
- ``checkpoint.json``: final agent parameters,
- ``timing.json``: wall-clock timings (the only non-reproducible file).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from bcq_lab.agents import BcAgent, BcConfig, BcqAgent, BcqConfig, DdpgAgent, DdpgConfig, VaeBcAgent, VaeBcConfig
from bcq_lab.batch import Batch, collect_batch, load_batch, save_batch, trim_incomplete_episode
from bcq_lab.envs import PendulumEnv, is_tabular, make_env, pendulum_dynamics, pendulum_obs, state_from_obs
from bcq_lab.kbrl import KbrlModel, KernelConfig, kbrl_iterate
from bcq_lab.mdp import deterministic_policy, evaluate_policy_exact, greedy_policy, uniform_policy, value_iteration
from bcq_lab.rng import stream
from bcq_lab.tabular import LearningSchedule, TabularTrainConfig, extract_bcq_policy, train_tabular

SCENARIOS = ("final-buffer", "concurrent", "imitation", "imperfect", "random-behavioral")
CONTINUOUS_AGENTS = ("bcq", "ddpg", "bc", "vae-bc")
TABULAR_AGENTS = ("tabular-q", "bcql", "kbrl")
AGENTS = CONTINUOUS_AGENTS + TABULAR_AGENTS
CSV_HEADER = ("iteration", "eval_return_mean", "eval_return_std", "value_estimate", "mc_true_value", "wall_clock_s")
MC_NOTE = ("mc_true_value is a discounted Monte-Carlo return truncated after mc_horizon steps, so it is biased "
           "toward zero by at most gamma**mc_horizon * r_max / (1 - gamma) on time-limited tasks")


class ConfigError(ValueError):
    pass


# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "random-behavioral"
    env: str = "pendulum"
    agent: str = "bcq"
    total_steps: int = 30_000
    eval_interval: int = 2_000
    eval_episodes: int = 10
    seeds: tuple = (0,)
    discount: float = 0.99
    # agent hyperparameters
    lam: float = 0.75
    phi: float = 0.05
    n_samples: int = 10
    tau: float = 0.005
    lr: float = 1e-3
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    critic_weight_decay: float = 1e-2
    vae_weight_decay: float = 0.0
    batch_size: int = 100
    hidden: tuple = (400, 300)
    vae_hidden: tuple = (750, 750)
    # batch generation
    batch_path: str = ""
    expert_path: str = ""
    batch_transitions: int = 5_000
    final_buffer_sigma: float = 0.5
    concurrent_sigma: float = 0.1
    imperfect_sigma: float = 0.3
    imperfect_random_prob: float = 0.3
    tabular_behavior_eps: float = 0.3
    # online DDPG (behavioural agents and experts)
    exploration_sigma: float = 0.1
    start_steps: int = 1_000
    expert_steps: int = 50_000
    expert_seeds: tuple = (0, 1, 2)
    # tabular learners
    q_init: float = 0.0
    tabular_schedule: str = "polynomial"
    tabular_exponent: float = 0.8
    tabular_sampling: str = "iid"
    kbrl_bandwidth: float = 1.0
    # metrics
    value_samples: int = 100
    mc_horizon: int = 200
    record_wall_clock: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "expert_seeds", tuple(int(s) for s in self.expert_seeds))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "vae_hidden", tuple(int(h) for h in self.vae_hidden))
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.agent not in AGENTS:
            raise ConfigError(f"unknown agent {self.agent!r}; choose from {', '.join(AGENTS)}")
        try:
            tabular = is_tabular(self.env)
            make_env(self.env)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if tabular != (self.agent in TABULAR_AGENTS):
            raise ConfigError(f"agent {self.agent!r} cannot run on environment {self.env!r}")
        if tabular and self.scenario == "concurrent":
            raise ConfigError("the concurrent scenario needs a continuous environment")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.total_steps < 1 or self.eval_interval < 1:
            raise ConfigError("total_steps and eval_interval must be positive")
        if self.total_steps % self.eval_interval:
            raise ConfigError("eval_interval must divide total_steps")
        if self.eval_episodes < 1 or self.batch_size < 1 or self.value_samples < 1:
            raise ConfigError("eval_episodes, batch_size and value_samples must be positive")
        if self.tabular_schedule not in ("polynomial", "rescaled-linear", "constant"):
            raise ConfigError(f"unknown tabular_schedule {self.tabular_schedule!r}")

    @property
    def tabular(self) -> bool:
        return is_tabular(self.env)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
        defaults = {f.name: f.default for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            if key not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = _parse_value(defaults[key], value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {value!r} for {key!r}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _parse_value(default, text: str):
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(text)
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path)


# metrics


@dataclass
class MetricsRecord:
    iteration: int
    eval_return_mean: float
    eval_return_std: float
    value_estimate: float
    mc_true_value: float
    wall_clock_s: float = math.nan

    @property
    def divergent(self) -> bool:
        return not all(math.isfinite(v) for v in (self.eval_return_mean, self.value_estimate))

    def to_row(self) -> list:
        return [str(self.iteration)] + [_fmt(getattr(self, k)) for k in CSV_HEADER[1:]]

    def to_json(self) -> dict:
        doc = {k: (getattr(self, k) if math.isfinite(getattr(self, k)) else _fmt(getattr(self, k))) for k in CSV_HEADER[1:]}
        return {"iteration": self.iteration, **doc, "divergent": self.divergent}

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsRecord":
        return cls(int(doc["iteration"]), *(float(doc[k]) for k in CSV_HEADER[1:]))


def _fmt(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def metrics_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        writer.writerow(rec.to_row())
    return buf.getvalue()


def metrics_json(records) -> str:
    return json.dumps([r.to_json() for r in records], indent=1) + "\n"


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    return [MetricsRecord(int(r[0]), *(float(x) for x in r[1:])) for r in rows[1:]]


def read_metrics_json(path) -> list:
    return [MetricsRecord.from_json(d) for d in json.loads(Path(path).read_text())]


def emit_report(records, out_dir, formats=("csv", "json"), stem: str = "metrics") -> list:
    """Write ``records`` as ``<stem>.csv`` and/or ``<stem>.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt == "csv":
            text = metrics_csv(records)
        elif fmt == "json":
            text = metrics_json(records)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        path = out_dir / f"{stem}.{fmt}"
        path.write_text(text)
        written.append(path)
    return written


# environment instrumentation


class CountingEnv:
    """Wraps an environment and counts ``step`` calls."""

    def __init__(self, env):
        self.env = env
        self.steps = 0

    def __getattr__(self, name):
        return getattr(self.env, name)

    def step(self, action):
        self.steps += 1
        return self.env.step(action)


class ReplayBuffer:
    """Growing store of continuous transitions shared by learners."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int, metadata: dict):
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.metadata = dict(metadata)
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s_next, terminal, truncated) -> None:
        i = self.size
        self.s[i], self.a[i], self.r[i], self.s_next[i] = s, a, r, s_next
        self.terminal[i], self.truncated[i] = terminal, truncated and not terminal
        self.size += 1

    def minibatch(self, idx):
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], 1.0 - self.terminal[idx]

    def snapshot(self) -> Batch:
        n = self.size
        return Batch(dict(self.metadata), self.s[:n].copy(), self.a[:n].copy(), self.r[:n].copy(),
                     self.s_next[:n].copy(), self.terminal[:n].copy(), self.truncated[:n].copy())


def batch_minibatch(batch: Batch, idx):
    return batch.s[idx], batch.a[idx], batch.r[idx], batch.s_next[idx], 1.0 - batch.terminal[idx]


# agents


def make_agent(config: ExperimentConfig, seed: int, state_dim: int = 3, action_dim: int = 1, max_action: float = 2.0):
    c = config
    if c.agent == "bcq":
        return BcqAgent(BcqConfig(state_dim, action_dim, max_action, hidden=c.hidden, vae_hidden=c.vae_hidden, lr=c.lr,
                                  discount=c.discount, tau=c.tau, lam=c.lam, n_samples=c.n_samples, phi=c.phi,
                                  vae_weight_decay=c.vae_weight_decay, seed=seed))
    if c.agent == "ddpg":
        return make_ddpg(c, seed, state_dim, action_dim, max_action)
    if c.agent == "bc":
        return BcAgent(BcConfig(state_dim, action_dim, max_action, hidden=c.hidden, lr=c.lr, seed=seed))
    if c.agent == "vae-bc":
        return VaeBcAgent(VaeBcConfig(state_dim, action_dim, max_action, hidden=c.vae_hidden, lr=c.lr,
                                      weight_decay=c.vae_weight_decay, seed=seed))
    raise ConfigError(f"{c.agent!r} is not a continuous-control agent")


def make_ddpg(config: ExperimentConfig, seed: int, state_dim=3, action_dim=1, max_action=2.0) -> DdpgAgent:
    c = config
    return DdpgAgent(DdpgConfig(state_dim, action_dim, max_action, hidden=c.hidden, actor_lr=c.actor_lr,
                                critic_lr=c.critic_lr, critic_weight_decay=c.critic_weight_decay, discount=c.discount,
                                tau=c.tau, noise_sigma=c.exploration_sigma, seed=seed))


def load_agent(path):
    meta = json.loads(Path(path).read_text())["meta"]
    cls = {"bcq": BcqAgent, "ddpg": DdpgAgent, "bc": BcAgent, "vae-bc": VaeBcAgent}.get(meta.get("agent"))
    if cls is None:
        raise ValueError(f"{path}: not a continuous-agent checkpoint")
    return cls.load(path)


# continuous evaluation


def evaluate_continuous(agent, n_episodes: int, rng, horizon: int = 200) -> np.ndarray:
    """Undiscounted returns of ``n_episodes`` noise-free pendulum episodes, run side by side."""
    theta = rng.uniform(-np.pi, np.pi, n_episodes)
    thetadot = rng.uniform(-1.0, 1.0, n_episodes)
    total = np.zeros(n_episodes)
    for _ in range(horizon):
        a = agent.act_batch(pendulum_obs(theta, thetadot), rng)
        theta, thetadot, r = pendulum_dynamics(theta, thetadot, a[:, 0])
        total += r
    return total


def mc_true_value(agent, states, actions, discount: float, horizon: int, rng) -> np.ndarray:
    """Discounted return from each (s, a): take ``a``, then follow the agent for up to ``horizon`` steps."""
    theta, thetadot = state_from_obs(states)
    total = np.zeros(len(states))
    a = np.asarray(actions, dtype=float)
    for t in range(horizon):
        if t > 0:
            a = agent.act_batch(pendulum_obs(theta, thetadot), rng)
        theta, thetadot, r = pendulum_dynamics(theta, thetadot, a[:, 0])
        total += discount**t * r
    return total


def _critic_value(agent, s, a) -> float:
    if isinstance(agent, BcqAgent):
        return float(np.mean(agent.critic1(np.concatenate([s, a], axis=1))))
    if isinstance(agent, DdpgAgent):
        return float(np.mean(agent.q(s, a)))
    return math.nan


def continuous_record(agent, data, config: ExperimentConfig, iteration: int, eval_rng, value_rng, t0) -> MetricsRecord:
    returns = evaluate_continuous(agent, config.eval_episodes, eval_rng)
    idx = value_rng.integers(len(data), size=config.value_samples)
    s, a = data.s[idx], data.a[idx]
    value = _critic_value(agent, s, a)
    mc = math.nan
    if not math.isnan(value):
        mc = float(np.mean(mc_true_value(agent, s, a, config.discount, config.mc_horizon, eval_rng)))
    wall = time.perf_counter() - t0 if config.record_wall_clock else math.nan
    return MetricsRecord(iteration, float(returns.mean()), float(returns.std()), value, mc, wall)


def value_bound(discount: float, reward_bound: float) -> float:
    """1.5 * r_max_abs / (1 - gamma)."""
    return 1.5 * reward_bound / (1.0 - discount)


# online DDPG (behavioural agents, experts, concurrent learning)


@dataclass
class OnlineRun:
    agent: DdpgAgent
    buffer: ReplayBuffer
    records: list
    env_steps: int
    offline_agent: object = None
    offline_records: list = field(default_factory=list)
    offline_env_steps: int = 0


def run_online_ddpg(config: ExperimentConfig, seed: int, steps: int, sigma: float, policy_tag: str,
                    offline_agent=None, eval_interval: int | None = None) -> OnlineRun:
    """Train DDPG by interaction for ``steps`` steps, storing every transition.

    With ``offline_agent`` the second learner trains from the same buffer after
    every step and never touches the environment.
    """
    env = CountingEnv(PendulumEnv())
    agent = make_ddpg(config, seed)
    meta = dict(kind="continuous", env_id="pendulum", state_dim=3, action_dim=1, max_action=env.max_action,
                policy_tag=policy_tag, seed=seed, n_random_actions=0, gamma=config.discount)
    buffer = ReplayBuffer(steps, 3, 1, meta)
    collector, explore = stream(seed, "collector"), stream(seed, "explore")
    sampler, off_sampler = stream(seed, "sampler"), stream(seed, "offline_sampler")
    eval_rng, off_eval_rng = stream(seed, "eval"), stream(seed, "offline_eval")
    value_rng, off_value_rng = stream(seed, "mc"), stream(seed, "offline_mc")
    records, off_records = [], []
    t0 = time.perf_counter()
    obs = env.reset(collector)
    for t in range(1, steps + 1):
        if t <= config.start_steps:
            a = explore.uniform(-env.max_action, env.max_action, size=1)
        else:
            a = agent.act(obs, sigma, explore)
        obs_next, r, term, trunc = env.step(a)
        buffer.add(obs, a, r, obs_next, term, trunc)
        obs = env.reset() if (term or trunc) else obs_next
        if len(buffer) >= config.batch_size:
            agent.train_iteration(*buffer.minibatch(sampler.integers(len(buffer), size=config.batch_size)))
            if offline_agent is not None:
                offline_agent.train_iteration(*buffer.minibatch(off_sampler.integers(len(buffer), size=config.batch_size)))
        if eval_interval and t % eval_interval == 0:
            records.append(continuous_record(agent, buffer, config, t, eval_rng, value_rng, t0))
            if offline_agent is not None:
                off_records.append(continuous_record(offline_agent, buffer, config, t, off_eval_rng, off_value_rng, t0))
    return OnlineRun(agent, buffer, records, env.steps, offline_agent, off_records, 0)


def train_expert(config: ExperimentConfig, path=None) -> DdpgAgent:
    """Best of several seeded online DDPG runs, judged by final evaluation return."""
    best, best_score = None, -math.inf
    for seed in config.expert_seeds:
        run = run_online_ddpg(config, seed, config.expert_steps, config.exploration_sigma, "expert-training")
        score = float(evaluate_continuous(run.agent, config.eval_episodes, stream(seed, "expert_eval")).mean())
        if score > best_score:
            best, best_score = run.agent, score
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        best.save(path)
    return best


def run_concurrent(config: ExperimentConfig, seed: int) -> OnlineRun:
    """Behavioural DDPG (sigma = concurrent_sigma) and an off-policy learner sharing one buffer."""
    if config.tabular:
        raise ConfigError("the concurrent scenario needs a continuous environment")
    offline = make_agent(config, seed)
    return run_online_ddpg(config, seed, config.total_steps, config.concurrent_sigma, "ddpg-concurrent",
                           offline_agent=offline, eval_interval=config.eval_interval)


# scenario batches


def _load_expert(config: ExperimentConfig) -> DdpgAgent:
    if not config.expert_path or not Path(config.expert_path).exists():
        raise FileNotFoundError(f"expert checkpoint {config.expert_path!r} not found; run 'bcq-lab train --expert' first")
    return load_agent(config.expert_path)


def generate_scenario_batch(config: ExperimentConfig, seed: int) -> Batch:
    """The training batch for ``config.scenario`` on ``config.env``."""
    batch = _generate_tabular(config, seed) if config.tabular else _generate_continuous(config, seed)
    meta = dict(batch.metadata, gamma=config.discount, scenario=config.scenario, seed=seed)
    return Batch(meta, batch.s, batch.a, batch.r, batch.s_next, batch.terminal, batch.truncated)


def _generate_continuous(config: ExperimentConfig, seed: int) -> Batch:
    n = config.batch_transitions
    rng = stream(seed, "collector")
    if config.scenario == "random-behavioral":
        return collect_batch(PendulumEnv(), None, n, rng_seed=rng)
    if config.scenario == "final-buffer":
        return run_online_ddpg(config, seed, n, config.final_buffer_sigma, "ddpg-final-buffer").buffer.snapshot()
    if config.scenario == "concurrent":
        return run_online_ddpg(config, seed, n, config.concurrent_sigma, "ddpg-concurrent").buffer.snapshot()
    expert = _load_expert(config)
    policy = expert.act
    if config.scenario == "imitation":
        return collect_batch(PendulumEnv(), policy, n, rng_seed=rng, policy_tag="expert")
    return collect_batch(PendulumEnv(), policy, n, noise_sigma=config.imperfect_sigma,
                         random_action_prob=config.imperfect_random_prob, rng_seed=rng, policy_tag="imperfect-expert")


def _generate_tabular(config: ExperimentConfig, seed: int) -> Batch:
    env = make_env(config.env, config.discount)
    n = config.batch_transitions
    rng = stream(seed, "collector")
    optimal = value_iteration(env.mdp).policy
    if config.scenario == "random-behavioral":
        return collect_batch(env, uniform_policy(env.mdp), n, rng_seed=rng, policy_tag="uniform-random")
    if config.scenario == "final-buffer":
        # trajectories of a noisy near-optimal learner; trimming keeps the batch coherent
        batch = collect_batch(env, optimal, n, random_action_prob=config.tabular_behavior_eps, rng_seed=rng,
                              policy_tag="epsilon-greedy")
        return trim_incomplete_episode(batch)
    if config.scenario == "imitation":
        return collect_batch(env, optimal, n, rng_seed=rng, policy_tag="expert")
    if config.scenario == "imperfect":
        return collect_batch(env, optimal, n, random_action_prob=config.imperfect_random_prob, rng_seed=rng,
                             policy_tag="imperfect-expert")
    raise ConfigError(f"scenario {config.scenario!r} is not available for tabular environments")


# offline training


@dataclass
class OfflineRun:
    agent: object
    records: list
    training_env_steps: int = 0


def _check_batch(config: ExperimentConfig, batch: Batch) -> None:
    if config.tabular != batch.is_discrete:
        raise ConfigError(f"agent {config.agent!r} cannot train on a {batch.kind} batch")
    if batch.is_discrete:
        mdp = make_env(config.env, config.discount).mdp
        if (batch.metadata["n_states"], batch.metadata["n_actions"]) != (mdp.n_states, mdp.n_actions):
            raise ConfigError("batch dimensions do not match the environment")
    elif (batch.metadata["state_dim"], batch.metadata["action_dim"]) != (3, 1):
        raise ConfigError("batch dimensions do not match the environment")
    if len(batch) == 0:
        raise ConfigError("empty batch")


def run_offline_training(config: ExperimentConfig, batch: Batch, seed: int) -> OfflineRun:
    """Train purely from ``batch``; evaluation rollouts never feed the learner."""
    _check_batch(config, batch)
    if config.tabular:
        return _run_tabular(config, batch, seed)
    agent = make_agent(config, seed, batch.metadata["state_dim"], batch.metadata["action_dim"],
                       batch.metadata["max_action"])
    sampler, eval_rng, value_rng = stream(seed, "sampler"), stream(seed, "eval"), stream(seed, "mc")
    records = []
    t0 = time.perf_counter()
    for it in range(1, config.total_steps + 1):
        agent.train_iteration(*batch_minibatch(batch, sampler.integers(len(batch), size=config.batch_size)))
        if it % config.eval_interval == 0:
            records.append(continuous_record(agent, batch, config, it, eval_rng, value_rng, t0))
    return OfflineRun(agent, records, 0)


@dataclass
class TabularAgent:
    kind: str
    q: np.ndarray
    policy: np.ndarray
    model: KbrlModel | None = None

    def save(self, path) -> None:
        doc = {"agent": self.kind, "q": self.q.tolist(), "policy": [int(a) for a in self.policy.argmax(axis=1)]}
        Path(path).write_text(json.dumps(doc))


def _schedule(config: ExperimentConfig) -> LearningSchedule:
    if config.tabular_schedule == "rescaled-linear":
        return LearningSchedule.rescaled_linear(config.discount)
    if config.tabular_schedule == "constant":
        return LearningSchedule("constant", 1.0)
    return LearningSchedule("polynomial", 1.0, config.tabular_exponent)


def _run_tabular(config: ExperimentConfig, batch: Batch, seed: int) -> OfflineRun:
    mdp = make_env(config.env, config.discount).mdp
    value_rng = stream(seed, "mc")
    t0 = time.perf_counter()
    records = []

    def record(it, q, policy, q_at):
        q_pi = evaluate_policy_exact(mdp, policy)
        v = (q_pi * policy).sum(axis=1)
        idx = value_rng.integers(len(batch), size=config.value_samples)
        wall = time.perf_counter() - t0 if config.record_wall_clock else math.nan
        est = float(np.mean([q_at(batch.s[i], batch.a[i]) for i in idx]))
        true = float(np.mean(q_pi[batch.s[idx], batch.a[idx]]))
        records.append(MetricsRecord(it, float(mdp.initial_dist @ v), 0.0, est, true, wall))

    if config.agent == "kbrl":
        model = kbrl_iterate(KbrlModel.from_batch(batch, config.discount, KernelConfig(config.kbrl_bandwidth)))
        acts = [model.greedy_action([s]) for s in range(mdp.n_states)]
        policy = deterministic_policy(acts, mdp.n_actions)
        q = np.array([[model.q([s], a) if a in model.sampled_actions else np.nan for a in range(mdp.n_actions)]
                      for s in range(mdp.n_states)])
        for it in range(config.eval_interval, config.total_steps + 1, config.eval_interval):
            record(it, q, policy, lambda s, a: model.q([s], a))
        return OfflineRun(TabularAgent("kbrl", q, policy, model), records, 0)

    cfg = TabularTrainConfig(iterations=config.eval_interval, schedule=_schedule(config), q_init=config.q_init,
                             stop_on_convergence=False, sampling=config.tabular_sampling)
    rng = stream(seed, "sampler")
    result = None
    constrained = config.agent == "bcql"
    for it in range(config.eval_interval, config.total_steps + 1, config.eval_interval):
        result = train_tabular(batch, cfg, constrained=constrained, gamma=config.discount, resume=result, rng=rng)
        q = result.q
        policy = extract_bcq_policy(q, batch).as_tabular(fill_action=0) if constrained else greedy_policy(q)
        record(it, q, policy, lambda s, a: q[s, a])
    return OfflineRun(TabularAgent(config.agent, result.q, policy), records, 0)


# experiment driver


def run_dir(out, config: ExperimentConfig, seed: int) -> Path:
    return Path(out) / config.scenario / config.agent / str(seed)


def batch_stats(batch: Batch) -> dict:
    returns = batch.episode_returns()
    se = float(returns.std(ddof=1) / np.sqrt(len(returns))) if len(returns) > 1 else math.nan
    return {
        "n_transitions": len(batch),
        "checksum": batch.checksum(),
        "policy_tag": batch.metadata.get("policy_tag"),
        "n_random_actions": batch.metadata.get("n_random_actions"),
        "n_episodes": int(len(returns)),
        "episode_return_mean": float(returns.mean()) if len(returns) else math.nan,
        "episode_return_se": se,
    }


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return _fmt(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def run_seed(config: ExperimentConfig, seed: int, out) -> Path:
    """One seed end to end; returns the run directory."""
    t0 = time.perf_counter()
    target = run_dir(out, config, seed)
    target.mkdir(parents=True, exist_ok=True)
    (target / "config.txt").write_text(config.to_text())
    summary = {"scenario": config.scenario, "agent": config.agent, "env": config.env, "seed": seed,
               "mc_note": MC_NOTE}
    if config.scenario == "concurrent":
        run = run_concurrent(config, seed)
        batch = run.buffer.snapshot()
        records = run.offline_records
        emit_report(run.records, target, stem="behavioral_metrics")
        run.offline_agent.save(target / "checkpoint.json")
        run.agent.save(target / "behavioral_checkpoint.json")
        summary["training_env_steps"] = run.offline_env_steps
        summary["behavioral_env_steps"] = run.env_steps
    else:
        batch = load_batch(config.batch_path) if config.batch_path else generate_scenario_batch(config, seed)
        run = run_offline_training(config, batch, seed)
        records = run.records
        run.agent.save(target / "checkpoint.json")
        summary["training_env_steps"] = run.training_env_steps
    save_batch(batch, target / "batch.jsonl")
    emit_report(records, target)
    summary["batch"] = batch_stats(batch)
    summary["divergent"] = any(r.divergent for r in records)
    if not config.tabular:
        bound = value_bound(config.discount, PendulumEnv.reward_bound)
        summary["value_bound"] = bound
        summary["value_within_bound"] = all(abs(r.value_estimate) <= bound for r in records
                                            if not math.isnan(r.value_estimate))
    (target / "summary.json").write_text(json.dumps(_json_safe(summary), indent=1, sort_keys=True) + "\n")
    (target / "timing.json").write_text(json.dumps({"wall_clock_s": time.perf_counter() - t0}) + "\n")
    return target


def _run_seed_job(args):
    text, seed, out = args
    return str(run_seed(ExperimentConfig.from_text(text), seed, out))


def run_experiment(config: ExperimentConfig, out, seeds=None, workers: int = 1) -> list:
    """Run every seed; seeds are independent and may use separate worker processes."""
    seeds = list(config.seeds if seeds is None else seeds)
    if workers <= 1 or len(seeds) == 1:
        return [run_seed(config, s, out) for s in seeds]
    jobs = [(config.to_text(), s, str(out)) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [Path(p) for p in pool.map(_run_seed_job, jobs)]


def merge_reports(out) -> list:
    """Aggregate per-seed metrics under each ``<out>/<scenario>/<agent>/`` into report.csv and report.json."""
    written = []
    for agent_dir in sorted(p.parent.parent for p in Path(out).glob("*/*/*/metrics.csv")):
        if agent_dir in written:
            continue
        per_seed = {}
        for path in sorted(agent_dir.glob("*/metrics.csv"), key=lambda p: int(p.parent.name)):
            per_seed[int(path.parent.name)] = read_metrics_csv(path)
        iterations = sorted({r.iteration for recs in per_seed.values() for r in recs})
        rows = []
        for it in iterations:
            vals = [r for recs in per_seed.values() for r in recs if r.iteration == it]
            ret = np.array([r.eval_return_mean for r in vals])
            se = float(ret.std(ddof=1) / np.sqrt(len(ret))) if len(ret) > 1 else math.nan
            rows.append({
                "iteration": it,
                "n_seeds": len(vals),
                "eval_return_mean": float(ret.mean()),
                "eval_return_se": se,
                "value_estimate": float(np.mean([r.value_estimate for r in vals])),
                "mc_true_value": float(np.mean([r.mc_true_value for r in vals])),
            })
        header = list(rows[0]) if rows else ["iteration", "n_seeds", "eval_return_mean", "eval_return_se",
                                             "value_estimate", "mc_true_value"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[k] if isinstance(row[k], int) else _fmt(row[k]) for k in header])
        (agent_dir / "report.csv").write_text(buf.getvalue())
        doc = {"seeds": sorted(per_seed), "rows": rows, "mc_note": MC_NOTE}
        (agent_dir / "report.json").write_text(json.dumps(_json_safe(doc), indent=1) + "\n")
        written.append(agent_dir)
    return written


def config_dict(config: ExperimentConfig) -> dict:
    return asdict(config)
