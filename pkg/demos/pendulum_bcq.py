"""A short BCQ run on pendulum data from a uniform-random policy.

Trains the reduced (64, 64) profile for a few thousand iterations and
prints evaluation returns next to the batch's own episodic return. The
acceptance suite runs the longer three-seed version of this.
"""

import sys

from bcq_lab import harness
from bcq_lab.harness import ExperimentConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 6_000
config = ExperimentConfig(agent="bcq", scenario="random-behavioral", total_steps=steps, eval_interval=steps // 6,
                          hidden=(64, 64), vae_hidden=(64, 64), vae_weight_decay=1e-3, eval_episodes=5)
batch = harness.generate_scenario_batch(config, seed=0)
stats = harness.batch_stats(batch)
print(f"batch episodes: mean return {stats['episode_return_mean']:.1f} +- {stats['episode_return_se']:.1f}")
run = harness.run_offline_training(config, batch, seed=0)
for r in run.records:
    print(f"iter {r.iteration:6d}  return {r.eval_return_mean:8.1f}  Q estimate {r.value_estimate:8.1f}  "
          f"MC value {r.mc_true_value:8.1f}")
