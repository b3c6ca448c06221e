"""Batch reinforcement learning laboratory.

Exact tabular machinery for studying extrapolation error (empirical MDPs,
batch-constrained Q-learning, kernel-based RL) together with a numpy
implementation of BCQ and its baselines for continuous control.
"""

from bcq_lab.mdp import (
    FiniteMdp,
    bellman_backup,
    evaluate_policy_exact,
    value_iteration,
    greedy_policy,
    occupancy,
    mc_return,
)
from bcq_lab.batch import Batch, empirical_mdp, is_coherent, is_batch_constrained
from bcq_lab.tabular import train_tabular, extract_bcq_policy
from bcq_lab.extrapolation import (
    epsilon_direct,
    epsilon_bellman,
    epsilon_aggregate,
    check_lemma1,
)

__version__ = "0.1.0"
