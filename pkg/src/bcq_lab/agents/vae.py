"""State-conditioned VAE over actions."""

from __future__ import annotations

import numpy as np

from bcq_lab.nn import Adam, Mlp

LOG_STD_MIN, LOG_STD_MAX = -4.0, 15.0
LATENT_CLIP = 0.5


def kl_divergence(mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """KL(N(mu, sigma) || N(0, 1)) per row, summed over latent dimensions."""
    return -0.5 * np.sum(1.0 + 2.0 * log_std - mu**2 - np.exp(2.0 * log_std), axis=-1)


class Vae:
    """Encoder E(s, a) -> (mu, log sigma); decoder D(s, z) -> action.

    The latent dimension defaults to twice the action dimension and the KL
    weight to 1 / (2 * latent_dim).
    """

    def __init__(self, state_dim: int, action_dim: int, max_action, hidden=(750, 750), latent_dim: int | None = None,
                 rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.latent_dim = latent_dim or 2 * action_dim
        self.max_action = np.broadcast_to(np.asarray(max_action, dtype=float), (action_dim,)).copy()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.encoder = Mlp([state_dim + action_dim, *hidden, 2 * self.latent_dim], rng=rng)
        self.decoder = Mlp([state_dim + self.latent_dim, *hidden, action_dim], head="tanh", scale=self.max_action, rng=rng)

    @property
    def kl_weight(self) -> float:
        return 1.0 / (2 * self.latent_dim)

    @property
    def params(self) -> list:
        return self.encoder.params + self.decoder.params

    def encode(self, s, a):
        out = self.encoder(np.concatenate([s, a], axis=1))
        mu, log_std = out[:, : self.latent_dim], out[:, self.latent_dim:]
        return mu, np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def decode(self, s, z):
        return self.decoder(np.concatenate([s, z], axis=1))

    def loss_and_grads(self, s, a, noise):
        """Loss and parameter gradients for fixed standard-normal ``noise``.

        Per sample: sum_i (D(s, z) - a)_i^2 + kl_weight * KL, with
        z = mu + sigma * noise. Averaged over the batch.
        """
        n = s.shape[0]
        enc_out, enc_cache = self.encoder.forward(np.concatenate([s, a], axis=1), keep=True)
        j = self.latent_dim
        mu, raw_log_std = enc_out[:, :j], enc_out[:, j:]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        z = mu + std * noise
        recon, dec_cache = self.decoder.forward(np.concatenate([s, z], axis=1), keep=True)
        diff = recon - a
        recon_loss = np.sum(diff**2) / n
        kl = kl_divergence(mu, log_std)
        kl_loss = kl.mean()
        loss = recon_loss + self.kl_weight * kl_loss

        dec_grads, g_in, _ = self.decoder.backward(dec_cache, 2.0 * diff / n)
        g_z = g_in[:, self.state_dim:]
        w = self.kl_weight / n
        g_mu = g_z + w * mu
        g_log_std = g_z * noise * std + w * (std**2 - 1.0)
        g_log_std = g_log_std * ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX))
        enc_grads, _, _ = self.encoder.backward(enc_cache, np.concatenate([g_mu, g_log_std], axis=1))
        info = {"vae_loss": float(loss), "recon_loss": float(recon_loss), "kl_loss": float(kl_loss)}
        return loss, enc_grads + dec_grads, info

    def sample(self, s, n: int, rng, clip: float = LATENT_CLIP, z=None):
        """``n`` decoded actions per state, grouped by state: shape (len(s) * n, action_dim).

        Latents are standard normal clipped to [-clip, clip] unless given.
        """
        if n < 1:
            raise ValueError("n must be at least 1")
        s_rep = np.repeat(np.asarray(s, dtype=float), n, axis=0)
        if z is None:
            z = np.clip(rng.standard_normal((s_rep.shape[0], self.latent_dim)), -clip, clip)
        return self.decode(s_rep, z)

    def nets(self) -> dict:
        return {"vae_encoder": self.encoder, "vae_decoder": self.decoder}


def vae_loss(vae: Vae, states, actions, noise):
    return vae.loss_and_grads(states, actions, noise)


def vae_sample(vae: Vae, states, n: int, rng):
    return vae.sample(states, n, rng)


class VaeTrainer:
    def __init__(self, vae: Vae, lr: float = 1e-3, weight_decay: float = 0.0):
        self.vae = vae
        self.opt = Adam(vae.params, lr=lr, weight_decay=weight_decay)

    def step(self, s, a, rng) -> dict:
        noise = rng.standard_normal((s.shape[0], self.vae.latent_dim))
        _, grads, info = self.vae.loss_and_grads(s, a, noise)
        self.opt.step(grads)
        return info
