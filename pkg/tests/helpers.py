import itertools

import numpy as np

from bcq_lab.batch import Batch
from bcq_lab.envs import RandomMdpSpec, make_random_mdp
from bcq_lab.mdp import FiniteMdp, deterministic_policy, evaluate_policy_exact


def single_state(reward=1.0, gamma=0.9, n_actions=1):
    p = np.ones((1, n_actions, 1))
    r = np.full((1, n_actions, 1), reward)
    return FiniteMdp(p, r, gamma, np.ones(1))


def random_mdp(seed, n_states=5, n_actions=3, deterministic=False, gamma=0.9, **kw):
    return make_random_mdp(RandomMdpSpec(n_states, n_actions, deterministic=deterministic, seed=seed,
                                         discount=gamma, branching=min(3, n_states), **kw))


def random_policy(rng, n_states, n_actions, deterministic=False):
    if deterministic:
        return deterministic_policy(rng.integers(n_actions, size=n_states), n_actions)
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def sampled_batch(mdp, rng, n, pair_probs=None):
    """``n`` transitions with (s, a) drawn from ``pair_probs`` (uniform by default) and s' ~ p."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    live = np.flatnonzero(~mdp.terminal)
    if pair_probs is None:
        pair_probs = np.zeros((n_s, n_a))
        pair_probs[live] = 1.0
    flat = pair_probs.ravel() / pair_probs.sum()
    rows = []
    for k in rng.choice(n_s * n_a, size=n, p=flat):
        s, a = divmod(int(k), n_a)
        sn = int(rng.choice(n_s, p=mdp.transition[s, a]))
        rows.append((s, a, float(mdp.reward[s, a, sn]), sn, bool(mdp.terminal[sn])))
    return Batch.discrete(rows, n_s, n_a)


def enumerate_best_values(mdp):
    """Elementwise max of Q^pi over every deterministic policy."""
    best = np.full((mdp.n_states, mdp.n_actions), -np.inf)
    for acts in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        best = np.maximum(best, evaluate_policy_exact(mdp, deterministic_policy(acts, mdp.n_actions)))
    return best


def fd_check(loss_fn, params, grads, rng, n_probe=20, step=1e-5, floor=1e-6):
    """Compare analytic ``grads`` to central differences at ``n_probe`` random coordinates.

    ``loss_fn()`` must read the (mutated in place) ``params``. Returns the worst
    relative error |numeric - analytic| / max(|numeric|, |analytic|, floor).
    """
    worst = 0.0
    sizes = np.array([p.size for p in params])
    for _ in range(n_probe):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = np.unravel_index(int(rng.integers(params[k].size)), params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + step
        up = loss_fn()
        params[k][idx] = old - step
        down = loss_fn()
        params[k][idx] = old
        numeric = (up - down) / (2 * step)
        analytic = grads[k][idx]
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor))
    return worst
