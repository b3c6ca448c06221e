"""Dense networks with hand-written backprop, Adam and target averaging."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "bcq-lab-checkpoint"
CHECKPOINT_VERSION = 1


class Mlp:
    """ReLU multilayer perceptron with a linear or scaled-tanh head.

    ``sizes`` lists every layer width, input first. When ``inject_dim`` is
    set, a second input of that width is concatenated to the activations
    entering layer 1 (the DDPG critic feeds its action there). With
    ``head="tanh"`` the output is ``scale * tanh(z)``; ``scale`` may be a
    vector, one entry per output.
    """

    def __init__(self, sizes, head: str = "linear", scale=1.0, inject_dim: int = 0, rng=None):
        if head not in ("linear", "tanh"):
            raise ValueError(f"unknown head {head!r}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if inject_dim and len(sizes) < 3:
            raise ValueError("injection needs a hidden layer")
        self.sizes = [int(x) for x in sizes]
        self.head = head
        self.scale = np.asarray(scale, dtype=float)
        self.inject_dim = int(inject_dim)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if i == 1:
                fan_in += self.inject_dim
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone.head = self.head
        clone.scale = self.scale.copy()
        clone.inject_dim = self.inject_dim
        clone.params = [p.copy() for p in self.params]
        return clone

    def forward(self, x, extra=None, keep: bool = False):
        """Output for a batch of inputs; with ``keep`` also the cache for ``backward``."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input of shape (N, {self.sizes[0]}), got {x.shape}")
        if self.inject_dim:
            extra = np.asarray(extra, dtype=float)
            if extra.shape != (x.shape[0], self.inject_dim):
                raise ValueError(f"expected injected input of shape ({x.shape[0]}, {self.inject_dim})")
        inputs = []
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            if i == 1 and self.inject_dim:
                h = np.concatenate([h, extra], axis=1)
            inputs.append(h)
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                h = np.maximum(h, 0.0)
        if self.head == "tanh":
            t = np.tanh(h)
            out = self.scale * t
        else:
            t = None
            out = h
        if keep:
            return out, (inputs, t)
        return out

    __call__ = forward

    def backward(self, cache, grad_out):
        """Parameter gradients and input gradients for upstream ``grad_out``.

        Returns ``(grads, grad_x, grad_extra)``; ``grad_extra`` is None
        without injection.
        """
        inputs, t = cache
        g = np.asarray(grad_out, dtype=float)
        if self.head == "tanh":
            g = g * self.scale * (1.0 - t * t)
        grads = [None] * len(self.params)
        grad_extra = None
        for i in reversed(range(self.n_layers)):
            h_in = inputs[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i == 1 and self.inject_dim:
                grad_extra = g[:, -self.inject_dim:]
                g = g[:, : -self.inject_dim]
            if i > 0:
                # relu derivative from the post-activation stored as the next layer's input
                prev = inputs[i][:, : self.sizes[i]] if (i == 1 and self.inject_dim) else inputs[i]
                g = g * (prev > 0)
        return grads, g, grad_extra

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "head": self.head,
            "scale": self.scale.tolist(),
            "inject_dim": self.inject_dim,
            "params": [p.tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        net = cls.__new__(cls)
        net.sizes = list(doc["sizes"])
        net.head = doc["head"]
        net.scale = np.asarray(doc["scale"], dtype=float)
        net.inject_dim = int(doc["inject_dim"])
        net.params = [np.asarray(p, dtype=float) for p in doc["params"]]
        expected = []
        for i, (a, b) in enumerate(zip(net.sizes[:-1], net.sizes[1:])):
            expected += [(a + (net.inject_dim if i == 1 else 0), b), (b,)]
        if [p.shape for p in net.params] != expected:
            raise ValueError("checkpoint parameter shapes do not match the declared layer sizes")
        return net


def mlp_forward(net: Mlp, x, extra=None):
    return net.forward(x, extra)


def mlp_backward(net: Mlp, x, grad_out, extra=None):
    """Recompute the forward pass and return ``(param_grads, grad_x, grad_extra)``."""
    _, cache = net.forward(x, extra, keep=True)
    return net.backward(cache, grad_out)


class Adam:
    """Bias-corrected Adam; ``weight_decay`` adds an L2 term to the gradient."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter is required")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [x.tolist() for x in self.m], "v": [x.tolist() for x in self.v]}


def adam_step(state: Adam, params, grads):
    """Functional wrapper: apply one Adam step to ``params`` tracked by ``state``."""
    if params is not state.params:
        raise ValueError("Adam state tracks a different parameter list")
    state.step(grads)
    return params


def polyak_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    """theta' <- tau * theta + (1 - tau) * theta', in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for tp, op in zip(target.params, online.params):
        tp *= 1.0 - tau
        tp += tau * op
    return target


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "nets": {name: net.to_dict() for name, net in nets.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Returns ``(nets, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    return {name: Mlp.from_dict(d) for name, d in doc["nets"].items()}, doc["meta"]
