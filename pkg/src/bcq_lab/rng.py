"""Seeded random streams.

Every stochastic component (batch collector, VAE noise, minibatch sampler,
network initialisation, evaluation rollouts) owns an independent
``numpy.random.Generator`` backed by PCG64. Streams are derived from a single
integer seed with ``SeedSequence.spawn`` keyed by component name, so adding a
component never perturbs the draws seen by another one. Gaussian draws use
numpy's ziggurat sampler, which is deterministic for a given generator state.
"""

from __future__ import annotations

import hashlib

import numpy as np

COMPONENTS = ("collector", "init", "vae_noise", "sampler", "eval", "explore", "mc")


def _component_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, component: str) -> np.random.Generator:
    """Generator for ``component`` derived from ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_component_key(component),))
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept an int seed, None or an existing Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
