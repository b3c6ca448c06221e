"""Behavioural cloning baselines: MSE regression and VAE sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from bcq_lab.agents.vae import Vae, VaeTrainer
from bcq_lab.nn import Adam, Mlp, load_checkpoint, save_checkpoint
from bcq_lab.rng import stream


@dataclass
class BcConfig:
    state_dim: int
    action_dim: int
    max_action: float
    hidden: tuple = (400, 300)
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


def bc_loss_and_grads(net: Mlp, s, a):
    """Mean over samples of the summed squared action error."""
    pred, cache = net.forward(s, keep=True)
    diff = pred - a
    grads, _, _ = net.backward(cache, 2.0 * diff / len(s))
    return float(np.sum(diff**2) / len(s)), grads


class BcAgent:
    def __init__(self, config: BcConfig):
        self.config = c = config
        self.net = Mlp([c.state_dim, *c.hidden, c.action_dim], head="tanh", scale=c.max_action,
                       rng=stream(c.seed, "init"))
        self.opt = Adam(self.net.params, lr=c.lr)
        self.iterations = 0

    def train_iteration(self, s, a, *_ignored) -> dict:
        if len(s) == 0:
            raise ValueError("empty minibatch")
        loss, grads = bc_loss_and_grads(self.net, s, a)
        self.opt.step(grads)
        self.iterations += 1
        return {"bc_loss": loss}

    def act_batch(self, states, rng=None) -> np.ndarray:
        return self.net(np.atleast_2d(np.asarray(states, dtype=float)))

    def act(self, state, rng=None) -> np.ndarray:
        return self.act_batch(np.asarray(state, dtype=float)[None, :])[0]

    def save(self, path) -> None:
        save_checkpoint(path, {"bc": self.net}, {"agent": "bc", "config": asdict(self.config), "iterations": self.iterations})

    @classmethod
    def load(cls, path) -> "BcAgent":
        nets, meta = load_checkpoint(path)
        agent = cls(BcConfig(**meta["config"]))
        agent.net = nets["bc"]
        agent.opt = Adam(agent.net.params, lr=agent.config.lr)
        agent.iterations = meta["iterations"]
        return agent


def bc_train(agent: BcAgent, batch, iterations: int, batch_size: int = 100, rng=None) -> list:
    """Minibatch regression on the batch's (s, a) pairs; returns the loss trace."""
    rng = stream(agent.config.seed, "sampler") if rng is None else rng
    losses = []
    for _ in range(iterations):
        idx = rng.integers(len(batch), size=batch_size)
        losses.append(agent.train_iteration(batch.s[idx], batch.a[idx])["bc_loss"])
    return losses


@dataclass
class VaeBcConfig:
    state_dim: int
    action_dim: int
    max_action: float
    hidden: tuple = (750, 750)
    latent_dim: int | None = None
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


class VaeBcAgent:
    """Acts with one decoder sample from a clipped latent."""

    def __init__(self, config: VaeBcConfig):
        self.config = c = config
        self.vae = Vae(c.state_dim, c.action_dim, c.max_action, c.hidden, c.latent_dim, rng=stream(c.seed, "init"))
        self.trainer = VaeTrainer(self.vae, lr=c.lr, weight_decay=c.weight_decay)
        self.noise_rng = stream(c.seed, "vae_noise")
        self.iterations = 0

    def train_iteration(self, s, a, *_ignored) -> dict:
        if len(s) == 0:
            raise ValueError("empty minibatch")
        self.iterations += 1
        return self.trainer.step(s, a, self.noise_rng)

    def act_batch(self, states, rng=None) -> np.ndarray:
        return self.vae.sample(np.atleast_2d(np.asarray(states, dtype=float)), 1, self.noise_rng if rng is None else rng)

    def act(self, state, rng=None) -> np.ndarray:
        return self.act_batch(np.asarray(state, dtype=float)[None, :], rng)[0]

    def save(self, path) -> None:
        save_checkpoint(path, self.vae.nets(), {"agent": "vae-bc", "config": asdict(self.config), "iterations": self.iterations})

    @classmethod
    def load(cls, path) -> "VaeBcAgent":
        nets, meta = load_checkpoint(path)
        agent = cls(VaeBcConfig(**meta["config"]))
        for name, net in nets.items():
            for dst, src in zip(agent.vae.nets()[name].params, net.params):
                dst[...] = src
        agent.iterations = meta["iterations"]
        return agent


def vae_bc_act(agent: VaeBcAgent, state, rng=None) -> np.ndarray:
    return agent.act(state, rng)
