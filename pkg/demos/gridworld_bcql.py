"""Unconstrained versus batch-constrained Q-learning on a gridworld.

Every move costs 0.2 and reaching the goal pays 1. The batch comes from a
noisy expert, so most states only show one or two of the four moves. Plain
Q-learning bootstraps from unseen moves whose value stays at the zero
initialization, which looks better than any costly move it actually saw, so
its greedy policy heads for moves the batch knows nothing about and
can end up wandering forever (value -0.2 / (1 - 0.9) = -2). BCQL only
ranks moves present in the batch.
"""

import numpy as np

from bcq_lab.batch import collect_batch, trim_incomplete_episode
from bcq_lab.envs import make_gridworld
from bcq_lab.mdp import TabularEnv, evaluate_policy_exact, greedy_policy, value_iteration
from bcq_lab.tabular import LearningSchedule, TabularTrainConfig, extract_bcq_policy, train_tabular

grid = make_gridworld(6, 6, discount=0.9)
mdp = grid.with_reward(grid.reward - 0.2 * ~grid.terminal[:, None, None])
expert = value_iteration(mdp).policy
batch = trim_incomplete_episode(collect_batch(TabularEnv(mdp, horizon=50), expert, 100,
                                              random_action_prob=0.2, rng_seed=3))
print(f"{len(batch)} transitions, {batch.pair_mask().sum()} of {mdp.n_states * 4} (s, a) pairs seen")


def start_value(policy):
    return float(mdp.initial_dist @ (evaluate_policy_exact(mdp, policy) * policy).sum(axis=1))


cfg = TabularTrainConfig(iterations=300_000, schedule=LearningSchedule.rescaled_linear(mdp.discount),
                         stop_on_convergence=False)
q = train_tabular(batch, cfg, gamma=mdp.discount).q
q_bc = train_tabular(batch, cfg, constrained=True, gamma=mdp.discount).q
print(f"Q-learning policy value {start_value(greedy_policy(q)):8.4f}")
print(f"BCQL policy value       {start_value(extract_bcq_policy(q_bc, batch).as_tabular(fill_action=0)):8.4f}")
print(f"optimal value           {start_value(expert):8.4f}")
