"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary before asserting,
so ``pytest tests/test_acceptance.py -v`` ends with the full scorecard.
"""

import math
import time

import numpy as np
import pytest

from bcq_lab import harness
from bcq_lab.agents import BcqAgent, BcqConfig, bcq_act, bcq_target
from bcq_lab.agents.bcq import (
    Perturbation,
    critic_loss_and_grads,
    critic_net,
    critic_value,
    perturbation_objective_and_grads,
)
from bcq_lab.agents.vae import Vae
from bcq_lab.batch import collect_batch, empirical_mdp, is_batch_constrained, is_coherent, trim_incomplete_episode
from bcq_lab.envs import PendulumEnv, RandomMdpSpec, make_gridworld, make_random_mdp
from bcq_lab.extrapolation import epsilon_aggregate, epsilon_bellman, epsilon_direct
from bcq_lab.harness import ExperimentConfig
from bcq_lab.kbrl import two_state_demo
from bcq_lab.mdp import TabularEnv, evaluate_policy_exact, occupancy, value_iteration
from bcq_lab.nn import Mlp, mlp_backward
from bcq_lab.tabular import LearningSchedule, TabularTrainConfig, extract_bcq_policy, train_tabular

from conftest import ACCEPTANCE_LINES
from helpers import fd_check, random_policy, sampled_batch


def report(number, name, ok, detail, elapsed, limit):
    within = elapsed < limit
    verdict = "PASS" if ok and within else "FAIL"
    ACCEPTANCE_LINES.append(f"criterion {number} [{verdict}] {name}: {detail}; {elapsed:.1f}s (limit {limit:.0f}s)")
    assert ok, detail
    assert within, f"took {elapsed:.1f}s, limit {limit}s"


def test_criterion_1_q_learning_converges_to_empirical_optimum():
    gamma = 0.8
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n_s, n_a = int(rng.integers(2, 13)), int(rng.integers(1, 5))
        mdp = make_random_mdp(RandomMdpSpec(n_s, n_a, deterministic=seed % 2 == 0, seed=seed, discount=gamma,
                                            branching=min(3, n_s), n_terminal=int(rng.integers(0, 2))))
        batch = sampled_batch(mdp, rng, int(rng.integers(n_s * n_a, 4 * n_s * n_a + 1)))
        ref = value_iteration(empirical_mdp(batch, mdp).to_finite_mdp()).q[:n_s]
        cfg = TabularTrainConfig(iterations=1_000_000, schedule=LearningSchedule.rescaled_linear(gamma),
                                 sampling="shuffle", stop_on_convergence=False, rng_seed=seed)
        q = train_tabular(batch, cfg, gamma=gamma).q
        worst = max(worst, float(np.max(np.abs(q - ref))))
    report(1, "Q-learning on batches reaches the empirical-MDP optimum", worst <= 1e-2,
           f"50 instances, worst max-norm error {worst:.2e} (tol 1e-2)", time.perf_counter() - t0, 300)


def test_criterion_2_zero_extrapolation_iff_batch_constrained():
    t0 = time.perf_counter()
    mismatches, worst_gap, counts = 0, 0.0, [0, 0]
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        n_s, n_a = int(rng.integers(2, 9)), int(rng.integers(2, 5))
        mdp = make_random_mdp(RandomMdpSpec(n_s, n_a, deterministic=True, seed=seed, discount=0.9, branching=1,
                                            n_terminal=int(rng.integers(0, 2)), reward_range=(0.5, 1.5)))
        pi = random_policy(rng, n_s, n_a, deterministic=bool(rng.integers(2)))
        live = ~mdp.terminal[:, None]
        # half the batches target the policy's own pairs so both verdicts occur
        probs = ((pi > 0) & live).astype(float) if seed % 2 else live * np.ones((n_s, n_a))
        if probs.sum() == 0:
            probs = live * np.ones((n_s, n_a))
        batch = sampled_batch(mdp, rng, int(rng.integers(1, 6 * n_s * n_a)), pair_probs=probs)
        emp = empirical_mdp(batch, mdp)
        eps = epsilon_direct(mdp, emp, pi)
        res = epsilon_bellman(mdp, emp, pi)
        worst_gap = max(worst_gap, float(np.max(np.abs(eps - res.values))))
        zero = epsilon_aggregate(eps, pi, occupancy(mdp, pi)) < 1e-8
        constrained = bool(is_batch_constrained(pi, batch, mdp))
        mismatches += zero != constrained
        counts[constrained] += 1
    ok = mismatches == 0 and worst_gap <= 1e-8 and min(counts) > 0
    report(2, "zero extrapolation error iff batch-constrained", ok,
           f"{mismatches} mismatches over 100 MDPs ({counts[1]} constrained), direct-vs-recursive gap {worst_gap:.1e}",
           time.perf_counter() - t0, 120)


def gridworld_instance(seed):
    rng = np.random.default_rng(2000 + seed)
    w, h = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    goal = (int(rng.integers(w)), int(rng.integers(h)))
    if goal == (0, 0):
        goal = (w - 1, h - 1)
    mdp = make_gridworld(w, h, goal=goal, discount=0.9)
    q_star = value_iteration(mdp).q
    # two fixed actions per state; the first is forced away from optimal somewhere
    first = rng.integers(4, size=mdp.n_states)
    first[0] = int(np.argmin(q_star[0]))
    second = (first + rng.integers(1, 4, size=mdp.n_states)) % 4
    behaviour = np.zeros((mdp.n_states, 4))
    behaviour[np.arange(mdp.n_states), first] += 0.6
    behaviour[np.arange(mdp.n_states), second] += 0.4
    env = TabularEnv(mdp, horizon=40)
    for attempt in range(20):
        batch = trim_incomplete_episode(collect_batch(env, behaviour, 400 * (attempt + 1), rng_seed=rng))
        if is_coherent(batch) and is_batch_constrained(behaviour, batch, mdp):
            return mdp, behaviour, batch
    raise RuntimeError(f"gridworld {seed}: no coherent batch-constrained sample")


def test_criterion_3_bcql_improves_on_behaviour():
    t0 = time.perf_counter()
    worst, suboptimal = math.inf, 0
    for seed in range(50):
        mdp, behaviour, batch = gridworld_instance(seed)
        cfg = TabularTrainConfig(iterations=200_000, schedule=LearningSchedule("constant", 1.0), rng_seed=seed)
        q = train_tabular(batch, cfg, constrained=True, gamma=mdp.discount).q
        pol = extract_bcq_policy(q, batch).as_tabular(fill_action=0)
        q_bcq, q_b = evaluate_policy_exact(mdp, pol), evaluate_policy_exact(mdp, behaviour)
        v_bcq, v_b = (q_bcq * pol).sum(axis=1), (q_b * behaviour).sum(axis=1)
        seen = batch.pair_mask()
        margin = min(float(np.min((q_bcq - q_b)[seen])), float(np.min((v_bcq - v_b)[batch.source_states()])))
        worst = min(worst, margin)
        suboptimal += bool(v_b[0] < value_iteration(mdp).q[0].max() - 1e-9)
    report(3, "BCQL policy dominates the behavioural policy on the batch", worst >= -1e-8,
           f"50 gridworlds ({suboptimal} with suboptimal behaviour), worst margin {worst:.2e}",
           time.perf_counter() - t0, 300)


def test_criterion_4_kbrl_counterexample():
    t0 = time.perf_counter()
    g = 0.99
    rep = two_state_demo(g)
    q = np.array(rep["kbrl_q"])
    err = max(abs(q[0, 1] - 1 / (1 - g**2)), abs(q[1, 0] - g / (1 - g**2)))
    ok = err < 1e-6 and rep["kbrl_policy"] == [1, 1] and rep["bcql_policy"] == [1, 0]
    report(4, "KBRL degenerates where BCQL recovers the optimum", ok,
           f"KBRL value error {err:.1e}, KBRL policy {rep['kbrl_policy']}, BCQL policy {rep['bcql_policy']}",
           time.perf_counter() - t0, 10)


def test_criterion_5_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = {}

    def track(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        net = Mlp([4, 12, 9, 3], head=("tanh", "linear")[seed % 2], scale=1.3, inject_dim=2 * (seed % 3 == 0), rng=rng)
        x, w = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        extra = rng.normal(size=(6, 2)) if net.inject_dim else None
        grads, _, _ = mlp_backward(net, x, w, extra)
        track("mlp", fd_check(lambda: float(np.sum(net(x, extra) * w)), net.params, grads, rng))

        vae = Vae(3, 2, 1.5, (10, 10), rng=rng)
        s, a = rng.normal(size=(6, 3)), rng.uniform(-1.5, 1.5, size=(6, 2))
        noise = rng.normal(size=(6, vae.latent_dim))
        _, grads, _ = vae.loss_and_grads(s, a, noise)
        track("vae", fd_check(lambda: vae.loss_and_grads(s, a, noise)[0], vae.params, grads, rng))

        pert = Perturbation(3, 2, 1.0, 0.4, (10, 10), rng)
        critic = critic_net(3, 2, (10, 10), rng)
        a = rng.uniform(-0.5, 0.5, size=(6, 2))
        _, grads = perturbation_objective_and_grads(pert, critic, s, a)
        track("perturbation", fd_check(lambda: perturbation_objective_and_grads(pert, critic, s, a)[0],
                                       pert.net.params, grads, rng))

        y = rng.normal(size=6)
        _, grads = critic_loss_and_grads(critic, s, a, y)
        track("critic", fd_check(lambda: critic_loss_and_grads(critic, s, a, y)[0], critic.params, grads, rng))
    ok = max(worst.values()) <= 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(5, "analytic gradients match central differences", ok, f"20 instances each, worst relative error: {detail}",
           time.perf_counter() - t0, 120)


def test_criterion_6_structural_checks():
    t0 = time.perf_counter()
    small = dict(state_dim=3, action_dim=1, max_action=2.0, hidden=(32, 32), vae_hidden=(32, 32))
    rng = np.random.default_rng(0)

    agent = BcqAgent(BcqConfig(**small, lam=1.0))
    r, s_next, term = rng.normal(size=64), rng.normal(size=(64, 3)), (rng.random(64) < 0.2).astype(float)
    y = bcq_target(agent, r, s_next, term, np.random.default_rng(1))
    s_rep, _, acts = agent.candidates(s_next, np.random.default_rng(1), target=True)
    q = np.minimum(critic_value(agent.critic1_target, s_rep, acts), critic_value(agent.critic2_target, s_rep, acts))
    clipped_dq = r + (1 - term) * 0.99 * q.reshape(64, -1).max(axis=1)
    min_exact = bool(np.array_equal(y, clipped_dq))

    agent = BcqAgent(BcqConfig(**small, phi=0.0, n_samples=1))
    states = rng.normal(size=(200, 3))
    raw_exact = all(
        np.array_equal(bcq_act(agent, st, np.random.default_rng(i)), agent.vae.sample(st[None], 1, np.random.default_rng(i))[0])
        for i, st in enumerate(states))

    agent = BcqAgent(BcqConfig(**small, phi=0.05))
    for p in agent.actor.net.params:
        p *= 50.0  # drive the tanh head into saturation
    s, a = rng.normal(size=(100_000, 3)) * 3, rng.uniform(-2, 2, size=(100_000, 1))
    residual = np.abs(agent.actor.residual(s, a)).max()
    bounded = residual <= agent.actor.bound
    ok = min_exact and raw_exact and bounded
    report(6, "BCQ structural identities", ok,
           f"lambda=1 target is clipped double Q: {min_exact}; phi=0,n=1 returns raw sample: {raw_exact}; "
           f"max |xi| over 1e5 samples {residual:.4f} <= {agent.actor.bound:.2f}", time.perf_counter() - t0, 60)


PENDULUM = ExperimentConfig(scenario="random-behavioral", env="pendulum", agent="bcq", total_steps=20_000,
                            eval_interval=2_000, eval_episodes=10, seeds=(0, 1, 2), hidden=(64, 64),
                            vae_hidden=(64, 64), vae_weight_decay=1e-3, batch_transitions=5_000)


def test_criterion_7_pendulum_reproduction(tmp_path):
    t0 = time.perf_counter()
    per_seed, final, batch_returns, in_bound = [], [], [], True
    bound = harness.value_bound(PENDULUM.discount, PendulumEnv.reward_bound)
    for seed in PENDULUM.seeds:
        s0 = time.perf_counter()
        batch = harness.generate_scenario_batch(PENDULUM, seed)
        run = harness.run_offline_training(PENDULUM, batch, seed)
        per_seed.append(time.perf_counter() - s0)
        final += [r.eval_return_mean for r in run.records[-5:]]
        batch_returns += list(batch.episode_returns())
        in_bound &= all(abs(r.value_estimate) <= bound for r in run.records)
    final, batch_returns = np.array(final), np.array(batch_returns)
    se = math.sqrt(final.var(ddof=1) / len(final) + batch_returns.var(ddof=1) / len(batch_returns))
    gap = final.mean() - batch_returns.mean()
    ok = gap >= 3 * se and in_bound
    report(7, "BCQ beats the uniform-random pendulum batch", ok,
           f"BCQ final-5 mean {final.mean():.1f} vs batch {batch_returns.mean():.1f}, gap {gap / se:.1f} pooled SE; "
           f"values within +-{bound:.0f}: {in_bound}; slowest seed {max(per_seed):.0f}s",
           max(per_seed), 1800)


DETERMINISM = [
    dict(agent="bcq", total_steps=60, eval_interval=30, hidden=(16, 16), vae_hidden=(16, 16)),
    dict(agent="ddpg", total_steps=60, eval_interval=30, hidden=(16, 16)),
    dict(agent="bc", total_steps=60, eval_interval=30, hidden=(16, 16)),
    dict(agent="vae-bc", total_steps=60, eval_interval=30, vae_hidden=(16, 16)),
    dict(agent="bcq", scenario="concurrent", total_steps=120, eval_interval=60, start_steps=50,
         hidden=(16, 16), vae_hidden=(16, 16)),
    dict(agent="bcql", env="gridworld:4x4", scenario="final-buffer", total_steps=4000, eval_interval=1000),
    dict(agent="tabular-q", env="random-mdp:3", total_steps=4000, eval_interval=1000),
    dict(agent="kbrl", env="gridworld:3x3", scenario="imperfect", total_steps=100, eval_interval=50),
]


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    differing = []
    for i, kw in enumerate(DETERMINISM):
        cfg = ExperimentConfig(**{"eval_episodes": 2, "batch_transitions": 400, "value_samples": 10,
                                  "mc_horizon": 30, "batch_size": 32, "seeds": (0, 1), **kw})
        a = harness.run_experiment(cfg, tmp_path / f"{i}a")
        b = harness.run_experiment(cfg, tmp_path / f"{i}b")
        for da, db in zip(a, b):
            for f in sorted(da.iterdir()):
                if f.name != "timing.json" and f.read_bytes() != (db / f.name).read_bytes():
                    differing.append(f"{cfg.agent}/{f.name}")
    report(8, "repeated runs give byte-identical outputs", not differing,
           f"{len(DETERMINISM)} configs x 2 seeds compared, differing files: {differing or 'none'}",
           time.perf_counter() - t0, 600)
