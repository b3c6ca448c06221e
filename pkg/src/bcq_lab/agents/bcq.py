"""Batch-Constrained deep Q-learning for continuous actions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from bcq_lab.agents.vae import Vae, VaeTrainer
from bcq_lab.nn import Adam, Mlp, load_checkpoint, polyak_update, save_checkpoint
from bcq_lab.rng import stream


@dataclass
class BcqConfig:
    state_dim: int
    action_dim: int
    max_action: float
    hidden: tuple = (400, 300)
    vae_hidden: tuple = (750, 750)
    latent_dim: int | None = None
    lr: float = 1e-3
    discount: float = 0.99
    tau: float = 0.005
    lam: float = 0.75
    n_samples: int = 10
    phi: float = 0.05
    vae_weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.vae_hidden = tuple(self.vae_hidden)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.phi < 0:
            raise ValueError("phi must be non-negative")


def critic_net(state_dim, action_dim, hidden, rng) -> Mlp:
    return Mlp([state_dim + action_dim, *hidden, 1], rng=rng)


def critic_value(critic: Mlp, s, a) -> np.ndarray:
    return critic(np.concatenate([s, a], axis=1))[:, 0]


def critic_loss_and_grads(critic: Mlp, s, a, y):
    """Mean squared TD error against fixed targets ``y``."""
    q, cache = critic.forward(np.concatenate([s, a], axis=1), keep=True)
    diff = q[:, 0] - y
    loss = float(np.mean(diff**2))
    grads, _, _ = critic.backward(cache, (2.0 * diff / len(y))[:, None])
    return loss, grads


class Perturbation:
    """xi(s, a) = phi * max_action * tanh(f(s, a)); perturbed action clipped to bounds."""

    def __init__(self, state_dim, action_dim, max_action, phi, hidden, rng):
        self.max_action = float(max_action)
        self.phi = float(phi)
        self.net = Mlp([state_dim + action_dim, *hidden, action_dim], head="tanh", scale=self.phi * self.max_action, rng=rng)

    @property
    def bound(self) -> float:
        return self.phi * self.max_action

    def residual(self, s, a, net: Mlp | None = None):
        return (net or self.net)(np.concatenate([s, a], axis=1))

    def perturb(self, s, a, net: Mlp | None = None):
        return np.clip(a + self.residual(s, a, net), -self.max_action, self.max_action)


def perturbation_objective_and_grads(pert: Perturbation, critic: Mlp, s, a):
    """Loss -mean Q(s, clip(a + xi(s, a))) and its gradient w.r.t. the perturbation net.

    ``a`` are fixed generator samples; no gradient flows into them.
    """
    xi, p_cache = pert.net.forward(np.concatenate([s, a], axis=1), keep=True)
    raw = a + xi
    act = np.clip(raw, -pert.max_action, pert.max_action)
    q, q_cache = critic.forward(np.concatenate([s, act], axis=1), keep=True)
    n = s.shape[0]
    loss = -float(q.mean())
    _, g_in, _ = critic.backward(q_cache, np.full((n, 1), -1.0 / n))
    g_act = g_in[:, s.shape[1]:] * (np.abs(raw) < pert.max_action)
    grads, _, _ = pert.net.backward(p_cache, g_act)
    return loss, grads


def weighted_clipped_value(q1, q2, lam: float):
    """lam * min + (1 - lam) * max, elementwise."""
    return lam * np.minimum(q1, q2) + (1.0 - lam) * np.maximum(q1, q2)


class BcqAgent:
    """Generator, perturbation model and twin critics with targets."""

    def __init__(self, config: BcqConfig):
        self.config = c = config
        rng = stream(c.seed, "init")
        self.vae = Vae(c.state_dim, c.action_dim, c.max_action, c.vae_hidden, c.latent_dim, rng=rng)
        self.actor = Perturbation(c.state_dim, c.action_dim, c.max_action, c.phi, c.hidden, rng)
        self.actor_target = self.actor.net.copy()
        self.critic1 = critic_net(c.state_dim, c.action_dim, c.hidden, rng)
        self.critic2 = critic_net(c.state_dim, c.action_dim, c.hidden, rng)
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.vae_trainer = VaeTrainer(self.vae, lr=c.lr, weight_decay=c.vae_weight_decay)
        self.actor_opt = Adam(self.actor.net.params, lr=c.lr)
        self.critic1_opt = Adam(self.critic1.params, lr=c.lr)
        self.critic2_opt = Adam(self.critic2.params, lr=c.lr)
        self.noise_rng = stream(c.seed, "vae_noise")
        self.iterations = 0

    # acting

    def candidates(self, states, rng, target: bool = False, z=None):
        """Perturbed generator samples, n per state, grouped by state."""
        n = self.config.n_samples
        s_rep = np.repeat(states, n, axis=0)
        raw = self.vae.sample(states, n, rng, z=z)
        net = self.actor_target if target else None
        return s_rep, raw, self.actor.perturb(s_rep, raw, net)

    def act_batch(self, states, rng=None, z=None) -> np.ndarray:
        """Highest-Q1 candidate per state; the first candidate wins ties."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        rng = self.noise_rng if rng is None else rng
        s_rep, _, acts = self.candidates(states, rng, z=z)
        q = critic_value(self.critic1, s_rep, acts).reshape(len(states), self.config.n_samples)
        best = np.argmax(q, axis=1)
        return acts.reshape(len(states), self.config.n_samples, -1)[np.arange(len(states)), best]

    def act(self, state, rng=None) -> np.ndarray:
        return self.act_batch(np.asarray(state, dtype=float)[None, :], rng)[0]

    def value_estimate(self, states, rng=None) -> np.ndarray:
        """Q1(s, pi(s)) for a batch of states."""
        states = np.atleast_2d(states)
        return critic_value(self.critic1, states, self.act_batch(states, rng))

    # training

    def target(self, rewards, next_states, not_done, rng=None) -> np.ndarray:
        c = self.config
        rng = self.noise_rng if rng is None else rng
        s_rep, _, acts = self.candidates(next_states, rng, target=True)
        q1 = critic_value(self.critic1_target, s_rep, acts)
        q2 = critic_value(self.critic2_target, s_rep, acts)
        value = weighted_clipped_value(q1, q2, c.lam).reshape(len(next_states), c.n_samples).max(axis=1)
        return rewards + not_done * c.discount * value

    def train_iteration(self, s, a, r, s_next, not_done) -> dict:
        if len(s) == 0:
            raise ValueError("empty minibatch")
        c = self.config
        info = self.vae_trainer.step(s, a, self.noise_rng)

        y = self.target(r, s_next, not_done)
        loss1, g1 = critic_loss_and_grads(self.critic1, s, a, y)
        loss2, g2 = critic_loss_and_grads(self.critic2, s, a, y)
        self.critic1_opt.step(g1)
        self.critic2_opt.step(g2)

        sampled = self.vae.sample(s, 1, self.noise_rng)
        actor_loss, ga = perturbation_objective_and_grads(self.actor, self.critic1, s, sampled)
        self.actor_opt.step(ga)

        polyak_update(self.critic1_target, self.critic1, c.tau)
        polyak_update(self.critic2_target, self.critic2, c.tau)
        polyak_update(self.actor_target, self.actor.net, c.tau)
        self.iterations += 1
        info.update(critic_loss=0.5 * (loss1 + loss2), actor_loss=actor_loss)
        return info

    # persistence

    def nets(self) -> dict:
        return {
            **self.vae.nets(),
            "actor": self.actor.net,
            "actor_target": self.actor_target,
            "critic1": self.critic1,
            "critic2": self.critic2,
            "critic1_target": self.critic1_target,
            "critic2_target": self.critic2_target,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.nets(), {"agent": "bcq", "config": asdict(self.config), "iterations": self.iterations})

    @classmethod
    def load(cls, path) -> "BcqAgent":
        nets, meta = load_checkpoint(path)
        agent = cls(BcqConfig(**meta["config"]))
        for name, net in nets.items():
            mine = agent.nets()[name]
            for dst, src in zip(mine.params, net.params):
                dst[...] = src
        agent.iterations = meta["iterations"]
        return agent


def bcq_target(agent: BcqAgent, rewards, next_states, terminals, rng=None):
    return agent.target(rewards, next_states, 1.0 - np.asarray(terminals, dtype=float), rng)


def bcq_train_iteration(agent: BcqAgent, s, a, r, s_next, terminals) -> dict:
    return agent.train_iteration(s, a, r, s_next, 1.0 - np.asarray(terminals, dtype=float))


def bcq_act(agent: BcqAgent, state, rng=None):
    return agent.act(state, rng)
