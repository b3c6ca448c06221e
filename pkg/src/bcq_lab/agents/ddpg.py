"""DDPG with the action fed to the critic's second layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from bcq_lab.nn import Adam, Mlp, load_checkpoint, polyak_update, save_checkpoint
from bcq_lab.rng import stream


@dataclass
class DdpgConfig:
    state_dim: int
    action_dim: int
    max_action: float
    hidden: tuple = (400, 300)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    critic_weight_decay: float = 1e-2
    discount: float = 0.99
    tau: float = 0.005
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if len(self.hidden) < 1:
            raise ValueError("the critic needs at least one hidden layer")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


def ddpg_critic_loss_and_grads(critic: Mlp, s, a, y):
    q, cache = critic.forward(s, a, keep=True)
    diff = q[:, 0] - y
    grads, _, _ = critic.backward(cache, (2.0 * diff / len(y))[:, None])
    return float(np.mean(diff**2)), grads


class DdpgAgent:
    def __init__(self, config: DdpgConfig):
        self.config = c = config
        rng = stream(c.seed, "init")
        self.actor = Mlp([c.state_dim, *c.hidden, c.action_dim], head="tanh", scale=c.max_action, rng=rng)
        self.critic = Mlp([c.state_dim, *c.hidden, 1], inject_dim=c.action_dim, rng=rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params, lr=c.actor_lr)
        self.critic_opt = Adam(self.critic.params, lr=c.critic_lr, weight_decay=c.critic_weight_decay)
        self.iterations = 0

    def q(self, s, a) -> np.ndarray:
        return self.critic(s, a)[:, 0]

    def act_batch(self, states, rng=None) -> np.ndarray:
        return self.actor(np.atleast_2d(np.asarray(states, dtype=float)))

    def act(self, state, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
        a = self.act_batch(np.asarray(state, dtype=float)[None, :])[0]
        if noise_sigma > 0:
            a = a + rng.normal(0.0, noise_sigma * self.config.max_action, size=a.shape)
        return np.clip(a, -self.config.max_action, self.config.max_action)

    def value_estimate(self, states, rng=None) -> np.ndarray:
        states = np.atleast_2d(states)
        return self.q(states, self.act_batch(states))

    def target(self, rewards, next_states, not_done) -> np.ndarray:
        a_next = self.actor_target(next_states)
        return rewards + not_done * self.config.discount * self.critic_target(next_states, a_next)[:, 0]

    def train_iteration(self, s, a, r, s_next, not_done) -> dict:
        if len(s) == 0:
            raise ValueError("empty minibatch")
        if s.shape[1] != self.config.state_dim or a.shape[1] != self.config.action_dim:
            raise ValueError("minibatch dimensions do not match the agent")
        y = self.target(r, s_next, not_done)
        critic_loss, gc = ddpg_critic_loss_and_grads(self.critic, s, a, y)
        self.critic_opt.step(gc)

        pi, a_cache = self.actor.forward(s, keep=True)
        q, q_cache = self.critic.forward(s, pi, keep=True)
        n = len(s)
        _, _, g_pi = self.critic.backward(q_cache, np.full((n, 1), -1.0 / n))
        ga, _, _ = self.actor.backward(a_cache, g_pi)
        self.actor_opt.step(ga)

        polyak_update(self.critic_target, self.critic, self.config.tau)
        polyak_update(self.actor_target, self.actor, self.config.tau)
        self.iterations += 1
        return {"critic_loss": critic_loss, "actor_loss": -float(q.mean())}

    def nets(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "actor_target": self.actor_target,
                "critic_target": self.critic_target}

    def save(self, path) -> None:
        save_checkpoint(path, self.nets(), {"agent": "ddpg", "config": asdict(self.config), "iterations": self.iterations})

    @classmethod
    def load(cls, path) -> "DdpgAgent":
        nets, meta = load_checkpoint(path)
        agent = cls(DdpgConfig(**meta["config"]))
        _copy_params(agent.nets(), nets)
        agent.iterations = meta["iterations"]
        return agent


def _copy_params(dst_nets: dict, src_nets: dict) -> None:
    for name, net in src_nets.items():
        for dst, src in zip(dst_nets[name].params, net.params):
            dst[...] = src


def ddpg_train_iteration(agent: DdpgAgent, s, a, r, s_next, terminals) -> dict:
    return agent.train_iteration(s, a, r, s_next, 1.0 - np.asarray(terminals, dtype=float))


def ddpg_act(agent: DdpgAgent, state, noise_sigma: float = 0.0, rng=None) -> np.ndarray:
    return agent.act(state, noise_sigma, rng)
