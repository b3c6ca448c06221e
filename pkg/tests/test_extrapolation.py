import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcq_lab.batch import Batch, empirical_mdp, is_batch_constrained
from bcq_lab.envs import make_two_state, two_state_batch_transitions
from bcq_lab.extrapolation import (
    check_lemma1,
    epsilon_aggregate,
    epsilon_bellman,
    epsilon_direct,
    extrapolation_report,
)
from bcq_lab.mdp import deterministic_policy, occupancy

from helpers import random_mdp, random_policy, sampled_batch


def full_deterministic_batch(mdp):
    rows = [(s, a, float(mdp.reward[s, a, sn]), sn, bool(mdp.terminal[sn]))
            for s in range(mdp.n_states) for a in range(mdp.n_actions)
            for sn in [int(mdp.transition[s, a].argmax())]]
    return Batch.discrete(rows, mdp.n_states, mdp.n_actions)


def skewed_instance(seed, gamma=0.9):
    mdp = random_mdp(seed, gamma=gamma, n_terminal=1)
    rng = np.random.default_rng(seed)
    weights = rng.exponential(size=(5, 3)) ** 3
    batch = sampled_batch(mdp, rng, 25, pair_probs=weights * ~mdp.terminal[:, None])
    return mdp, empirical_mdp(batch, mdp), random_policy(rng, 5, 3)


class TestEpsilonDirect:
    def test_exact_batch_gives_zero(self):
        mdp = random_mdp(4, deterministic=True)
        emp = empirical_mdp(full_deterministic_batch(mdp), mdp)
        pi = random_policy(np.random.default_rng(4), 5, 3)
        assert np.max(np.abs(epsilon_direct(mdp, emp, pi))) < 1e-10

    def test_two_state_constrained_zero_on_support(self):
        mdp = make_two_state(0.99)
        emp = empirical_mdp(Batch.discrete(two_state_batch_transitions(), 2, 2), mdp)
        eps = epsilon_direct(mdp, emp, deterministic_policy([1, 0], 2))
        assert abs(eps[0, 1]) < 1e-9 and abs(eps[1, 0]) < 1e-9

    def test_matches_bellman_on_skewed(self):
        mdp, emp, pi = skewed_instance(0)
        res = epsilon_bellman(mdp, emp, pi)
        assert res.converged
        assert np.max(np.abs(res.values - epsilon_direct(mdp, emp, pi))) < 1e-8

    def test_dimension_mismatch(self):
        mdp, emp, pi = skewed_instance(1)
        with pytest.raises(ValueError):
            epsilon_direct(mdp, emp, pi[:4])


class TestEpsilonBellman:
    def test_zero_when_transitions_match(self):
        mdp = random_mdp(8, deterministic=True)
        emp = empirical_mdp(full_deterministic_batch(mdp), mdp)
        pi = random_policy(np.random.default_rng(8), 5, 3)
        assert np.max(np.abs(epsilon_bellman(mdp, emp, pi).values)) < 1e-10

    def test_gamma_zero_truncates(self):
        mdp, emp, pi = skewed_instance(3, gamma=0.0)
        p_m = np.concatenate([mdp.transition, np.zeros((5, 3, 1))], axis=2)
        r = emp.to_finite_mdp().reward[:5]
        expected = ((p_m - emp.p_b) * r).sum(axis=2)
        assert np.allclose(epsilon_bellman(mdp, emp, pi).values, expected, atol=1e-12)

    def test_rejects_bad_tol(self):
        mdp, emp, pi = skewed_instance(2)
        with pytest.raises(ValueError):
            epsilon_bellman(mdp, emp, pi, tol=0)

    def test_cap_flags_non_convergence(self):
        mdp, emp, pi = skewed_instance(2, gamma=0.99)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert not epsilon_bellman(mdp, emp, pi, max_sweeps=3).converged

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_equivalence_property(self, seed):
        mdp, emp, pi = skewed_instance(seed)
        assert np.max(np.abs(epsilon_bellman(mdp, emp, pi).values - epsilon_direct(mdp, emp, pi))) < 1e-8

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_linear_in_reward(self, seed):
        mdp, emp, pi = skewed_instance(seed)
        mdp2 = mdp.with_reward(2 * mdp.reward)
        emp2 = empirical_mdp(Batch.discrete([], 5, 3), mdp2)
        emp2.counts[...] = emp.counts
        assert np.allclose(epsilon_direct(mdp2, emp2, pi), 2 * epsilon_direct(mdp, emp, pi), atol=1e-8)


class TestAggregateAndRecovery:
    def test_zero_table(self):
        assert epsilon_aggregate(np.zeros((3, 2)), np.full((3, 2), 0.5), np.ones(3) / 3) == 0.0

    def test_absolute_value(self):
        eps = np.array([[-2.0, 7.0]])
        assert epsilon_aggregate(eps, np.array([[1.0, 0.0]]), np.array([1.0])) == 2.0

    def test_batch_constrained_deterministic_zero(self):
        mdp = make_two_state(0.9)
        pi = deterministic_policy([1, 0], 2)
        emp = empirical_mdp(Batch.discrete(two_state_batch_transitions(), 2, 2), mdp)
        assert epsilon_aggregate(epsilon_direct(mdp, emp, pi), pi, occupancy(mdp, pi)) < 1e-8

    def test_recovery_for_fully_seen_deterministic(self):
        mdp = random_mdp(2, deterministic=True)
        assert check_lemma1(mdp, empirical_mdp(full_deterministic_batch(mdp), mdp), np.full((5, 3), 1 / 3)).holds

    def test_no_recovery_for_finite_stochastic(self):
        mdp, emp, pi = skewed_instance(5)
        res = check_lemma1(mdp, emp, pi)
        assert not res.holds and res.max_divergence > 0 and res.worst_pair is not None

    def test_recovery_iff_zero_aggregate(self):
        rng = np.random.default_rng(0)
        agree = {True: 0, False: 0}
        for seed in range(100):
            det = seed % 2 == 0
            mdp = random_mdp(seed, deterministic=det, n_terminal=1, reward_range=(0.5, 1.5))
            if seed % 3 == 0:
                mdp = mdp.with_reward(mdp.reward * rng.choice([-50, 50], size=mdp.reward.shape) * ~mdp.terminal[:, None, None])
            pi = random_policy(rng, 5, 3, deterministic=bool(rng.integers(2)))
            batch = sampled_batch(mdp, rng, int(rng.integers(3, 40)))
            emp = empirical_mdp(batch, mdp)
            agg = epsilon_aggregate(epsilon_direct(mdp, emp, pi), pi, occupancy(mdp, pi))
            holds = check_lemma1(mdp, emp, pi).holds
            assert holds == (agg < 1e-8)
            agree[holds] += 1
        assert agree[True] > 0 and agree[False] > 0

    def test_zero_error_iff_batch_constrained(self):
        rng = np.random.default_rng(1)
        for seed in range(50):
            mdp = random_mdp(seed, deterministic=True, n_terminal=1, reward_range=(0.5, 1.5))
            pi = random_policy(rng, 5, 3, deterministic=bool(seed % 2))
            batch = sampled_batch(mdp, rng, int(rng.integers(3, 30)))
            emp = empirical_mdp(batch, mdp)
            agg = epsilon_aggregate(epsilon_direct(mdp, emp, pi), pi, occupancy(mdp, pi))
            assert bool(is_batch_constrained(pi, batch, mdp)) == (agg < 1e-8)

    def test_report_shape(self):
        mdp, emp, pi = skewed_instance(6)
        rep = extrapolation_report(mdp, emp, pi)
        assert set(rep) >= {"epsilon", "aggregate", "lemma1", "divergence", "occupancy"}
        assert len(rep["epsilon"]) == 5
