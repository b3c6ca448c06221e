"""How far does a batch-learned value drift from the truth?

A random stochastic MDP, a small uniform batch, and three policies: the
optimal one, the uniform one, and the policy BCQL extracts from the batch.
For each we print the aggregate extrapolation error and whether the
exact-recovery condition holds.
"""

import numpy as np

from bcq_lab.batch import collect_batch, empirical_mdp, is_batch_constrained
from bcq_lab.envs import RandomMdpSpec, make_random_mdp
from bcq_lab.extrapolation import check_lemma1, epsilon_aggregate, epsilon_direct
from bcq_lab.mdp import TabularEnv, occupancy, uniform_policy, value_iteration
from bcq_lab.tabular import TabularTrainConfig, extract_bcq_policy, train_tabular

mdp = make_random_mdp(RandomMdpSpec(6, 3, deterministic=False, seed=4, discount=0.9, n_terminal=1))
batch = collect_batch(TabularEnv(mdp, horizon=30), value_iteration(mdp).policy, 120,
                      random_action_prob=0.2, rng_seed=0)
emp = empirical_mdp(batch, mdp)
print(f"batch: {len(batch)} transitions covering {batch.pair_mask().sum()} of {mdp.n_states * mdp.n_actions} pairs")

q = train_tabular(batch, TabularTrainConfig(iterations=100_000), constrained=True, gamma=mdp.discount).q
policies = {
    "optimal": value_iteration(mdp).policy,
    "uniform": uniform_policy(mdp),
    "bcql": extract_bcq_policy(q, batch).as_tabular(fill_action=0),
}
for name, pi in policies.items():
    eps = epsilon_direct(mdp, emp, pi)
    agg = epsilon_aggregate(eps, pi, occupancy(mdp, pi))
    verdict = check_lemma1(mdp, emp, pi)
    print(f"{name:8s} aggregate error {agg:8.4f}  batch-constrained {bool(is_batch_constrained(pi, batch, mdp))!s:5s}"
          f"  exact recovery {verdict.holds}")

# Deterministic dynamics: now batch-constrained policies have zero error.
det = make_random_mdp(RandomMdpSpec(6, 3, deterministic=True, seed=4, discount=0.9, n_terminal=1))
batch = collect_batch(TabularEnv(det, horizon=30), value_iteration(det).policy, 120, random_action_prob=0.2, rng_seed=0)
q = train_tabular(batch, TabularTrainConfig(iterations=100_000), constrained=True, gamma=det.discount).q
pi = extract_bcq_policy(q, batch).as_tabular(fill_action=0)
agg = epsilon_aggregate(epsilon_direct(det, empirical_mdp(batch, det), pi), pi, occupancy(det, pi))
print(f"deterministic MDP, bcql policy: aggregate error {agg:.2e}")
