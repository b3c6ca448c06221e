import numpy as np
import pytest

from bcq_lab.batch import Batch
from bcq_lab.envs import two_state_batch_transitions
from bcq_lab.kbrl import KbrlModel, KernelConfig, MissingActionError, format_demo, kbrl_iterate, kbrl_q, two_state_demo


def two_state_model(gamma=0.99, bandwidth=1.0):
    batch = Batch.discrete(two_state_batch_transitions(), 2, 2)
    return KbrlModel.from_batch(batch, gamma, KernelConfig(bandwidth))


class TestKernel:
    def test_weights_are_distributions(self):
        rng = np.random.default_rng(0)
        w = KernelConfig(0.7).weights(rng.normal(size=(20, 3)), rng.normal(size=(15, 3)) * 5)
        assert np.all(w >= 0)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_far_queries_stay_finite(self):
        w = KernelConfig(0.01).weights(np.array([[1e3]]), np.array([[0.0], [1.0]]))
        assert np.isfinite(w).all() and w[0, 1] == pytest.approx(1.0)

    def test_custom_density(self):
        cfg = KernelConfig(1.0, density=lambda d: 1.0 / (1.0 + d))
        w = cfg.weights(np.array([[0.0]]), np.array([[0.0], [1.0]]))
        assert w[0].tolist() == pytest.approx([2 / 3, 1 / 3])

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            KernelConfig(0.0)


class TestKbrlQ:
    def test_single_sample_any_query(self):
        model = kbrl_iterate(two_state_model())
        target = 1.0 + 0.99 * model.values[1]
        for s in (-3.0, 0.0, 0.4, 7.0):
            assert kbrl_q(model, [s], 1) == pytest.approx(target, abs=1e-12)

    def test_small_bandwidth_limit(self):
        batch = Batch.discrete([(0, 0, 1.0, 0, True), (1, 0, 5.0, 1, True)], 2, 1)
        model = KbrlModel.from_batch(batch, 0.9, KernelConfig(1e-6))
        assert kbrl_q(model, [1.0], 0) == pytest.approx(5.0)
        assert kbrl_q(model, [0.0], 0) == pytest.approx(1.0)

    def test_converged_counterexample_values(self):
        g = 0.99
        model = kbrl_iterate(two_state_model(g))
        for s in (0.0, 1.0, 0.5):
            assert kbrl_q(model, [s], 1) == pytest.approx(1 / (1 - g**2), abs=1e-6)

    def test_missing_action(self):
        batch = Batch.discrete([(0, 0, 0.0, 0, False)], 1, 2)
        with pytest.raises(MissingActionError):
            KbrlModel.from_batch(batch, 0.9).q([0.0], 1)


class TestIterate:
    def test_gamma_zero_one_sweep(self):
        model = kbrl_iterate(two_state_model(gamma=0.0))
        assert model.iterations <= 2
        assert kbrl_q(model, [0.0], 1) == 1.0
        assert kbrl_q(model, [1.0], 0) == 0.0

    def test_closed_form(self):
        g = 0.99
        model = kbrl_iterate(two_state_model(g))
        assert kbrl_q(model, [0.0], 1) == pytest.approx(50.2512562814, abs=1e-6)
        assert kbrl_q(model, [1.0], 0) == pytest.approx(49.7487437186, abs=1e-6)

    def test_degenerate_policy(self):
        model = kbrl_iterate(two_state_model())
        assert [model.greedy_action([s]) for s in (0.0, 1.0)] == [1, 1]

    @pytest.mark.parametrize("g", [0.5, 0.9, 0.99])
    def test_closed_form_across_gamma(self, g):
        model = kbrl_iterate(two_state_model(g))
        assert kbrl_q(model, [0.0], 1) == pytest.approx(1 / (1 - g**2), abs=1e-6)
        assert kbrl_q(model, [1.0], 0) == pytest.approx(g / (1 - g**2), abs=1e-6)

    def test_contraction_of_deltas(self):
        g = 0.9
        model = kbrl_iterate(two_state_model(g))
        d = np.array(model.deltas)
        d = d[d > 1e-9]
        assert np.all(d[1:] / d[:-1] <= g + 1e-6)

    def test_iteration_cap(self):
        with pytest.raises(RuntimeError):
            kbrl_iterate(two_state_model(), max_iters=3)


class TestDemo:
    def test_report(self):
        g = 0.99
        rep = two_state_demo(g)
        assert rep["kbrl_policy"] == [1, 1]
        assert rep["kbrl_return_s0"] == pytest.approx(1.0, abs=1e-10)
        assert rep["bcql_policy"] == [1, 0]
        assert rep["bcql_return_s0"] == pytest.approx(1 / (1 - g**2), abs=1e-8)
        assert "KBRL" in format_demo(rep)

    def test_bcql_beats_kbrl_across_gamma(self):
        for g in np.round(np.arange(0.1, 1.0, 0.1), 1):
            rep = two_state_demo(float(g), bcql_iterations=5000)
            assert rep["bcql_return_s0"] > rep["kbrl_return_s0"]
