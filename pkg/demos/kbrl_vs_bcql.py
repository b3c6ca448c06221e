"""Kernel-based RL on the two-state toy, against batch-constrained Q-learning.

The batch holds one transition per state, each taking the optimal action.
KBRL's kernel spreads every sampled action over both states, so its greedy
policy always takes a1 and loops in s0 forever after one reward. BCQL only
bootstraps from actions seen at each state and recovers the optimum.
"""

import numpy as np

from bcq_lab.kbrl import format_demo, two_state_demo

print(format_demo(two_state_demo(0.99)))
print()
print(" gamma   KBRL return   BCQL return")
for gamma in np.round(np.arange(0.1, 1.0, 0.1), 1):
    rep = two_state_demo(float(gamma), bcql_iterations=5_000)
    print(f"  {gamma:.1f}   {rep['kbrl_return_s0']:11.4f}   {rep['bcql_return_s0']:11.4f}")
