import numpy as np
import pytest

from sadp.oracle import (InfiniteVarianceError, UndefinedCorrelationError,
                         estimator_stats, exact_grad_norms, fd_gradient_check,
                         measure_correlations, pearson, per_example_gradients,
                         project_to_capped_simplex, solve_probabilities_sorted,
                         variance_formula)
from sadp.pruning import solve_probabilities
from sadp.snn import NeuronConfig, Network, forward, backward_bptt
from sadp.verify import random_score_instance


def spike_batch(n, t, dim, classes, seed):
    rng = np.random.default_rng(seed)
    x = (rng.random((n, t, dim)) < 0.5).astype(float)
    return x, rng.integers(0, classes, n)


class TestExactNorms:
    def test_rank_one_single_step(self):
        net = Network.from_arch("dense:4", (6,), seed=1)
        cfg = NeuronConfig(decay=0.5, time_steps=1)
        x, y = spike_batch(3, 1, 6, 4, 0)
        rep = exact_grad_norms(net, x, y, cfg, (0,))
        grads, _ = per_example_gradients(net, x, y, cfg)
        manual = np.linalg.norm(grads[0].reshape(3, -1), axis=1)
        np.testing.assert_allclose(rep.full_norms, manual, atol=1e-12)
        # For one dense layer at T=1 the spike-aware bound is exact.
        np.testing.assert_allclose(rep.scores, rep.restricted_norms, atol=1e-9)

    def test_bound_holds_on_batch(self):
        net = Network.from_arch("dense:20,dense:5", (16,), seed=2)
        cfg = NeuronConfig(decay=0.3, time_steps=4)
        x, y = spike_batch(256, 4, 16, 5, 1)
        rep = exact_grad_norms(net, x, y, cfg, (0, 1))
        assert np.all(rep.scores >= rep.restricted_norms - 1e-9)

    def test_per_example_linearity(self):
        """The mean of per-example gradients equals the batch gradient."""
        net = Network.from_arch("dense:10,dense:3", (8,), seed=3)
        cfg = NeuronConfig(decay=0.5, time_steps=3)
        x, y = spike_batch(12, 3, 8, 3, 2)
        grads, fb = per_example_gradients(net, x, y, cfg)
        for g, batch in zip(grads, fb.btrace.weight_grads()):
            np.testing.assert_allclose(g.mean(axis=0), batch, atol=1e-10)


class TestSortedSolver:
    def test_worked_example(self):
        a = solve_probabilities_sorted(np.array([1.0, 2.0, 3.0, 10.0]), 2)
        np.testing.assert_allclose(a.probabilities, [1 / 6, 1 / 3, 1 / 2, 1.0],
                                   atol=1e-12)

    def test_no_clipping_case(self):
        a = solve_probabilities_sorted(np.array([1.0, 1.0, 2.0]), 1)
        np.testing.assert_allclose(a.probabilities, [0.25, 0.25, 0.5], atol=1e-12)
        assert a.clipped_count == 0

    def test_target_equals_n(self):
        a = solve_probabilities_sorted(np.array([0.5, 3.0]), 2)
        np.testing.assert_allclose(a.probabilities, 1.0)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            solve_probabilities_sorted(np.zeros(3), 1)
        with pytest.raises(ValueError):
            solve_probabilities_sorted(np.array([1.0, -1.0]), 1)
        with pytest.raises(ValueError):
            solve_probabilities_sorted(np.array([1.0]), 2)

    def test_agrees_with_iterative(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(3, 100))
            g = random_score_instance(rng, n)
            s = int(rng.integers(1, n + 1))
            a = solve_probabilities_sorted(g, s)
            b = solve_probabilities(g, s)
            assert np.abs(a.probabilities - b.probabilities).max() <= 1e-9


class TestVarianceFormula:
    def test_single_example(self):
        assert variance_formula(np.array([1.0]), np.array([0.5]), 1) == \
            pytest.approx(1.0)

    def test_two_examples_quarter(self):
        v = variance_formula(np.array([1.0, 1.0]), np.array([0.8, 0.8]), 2)
        assert v == pytest.approx(2 * 0.2 / 0.8 / 4)

    def test_full_probability_zero_variance(self):
        assert variance_formula(np.array([3.0, 5.0]), np.ones(2), 2) == 0.0

    def test_homogeneous_degree_two(self):
        rng = np.random.default_rng(0)
        g = rng.random(10)
        p = rng.uniform(0.1, 1.0, 10)
        base = variance_formula(g, p, 10)
        assert variance_formula(3.0 * g, p, 10) == pytest.approx(9.0 * base)

    def test_zero_probability_nonzero_norm(self):
        with pytest.raises(InfiniteVarianceError):
            variance_formula(np.array([1.0, 1.0]), np.array([0.0, 1.0]), 2)


class TestEstimatorStats:
    def test_unbiased_within_standard_error(self):
        net = Network.from_arch("dense:6,dense:3", (8,), seed=4)
        cfg = NeuronConfig(decay=0.4, time_steps=3)
        x, y = spike_batch(24, 3, 8, 3, 5)
        rep = exact_grad_norms(net, x, y, cfg, (0, 1))
        p = solve_probabilities(rep.scores + 1e-9, 12).probabilities
        stats = estimator_stats(net, x, y, cfg, p, draws=5000, seed=6)
        dev = np.abs(stats.mean_estimate - stats.full_gradient)
        tol = 4.0 * stats.standard_errors + 1e-12
        assert np.all(dev <= tol)

    def test_error_matches_closed_form_for_norm_directions(self):
        """MC mean squared error agrees with the analytic variance formula.

        For independent Bernoulli masks the cross terms vanish, so
        E||ghat - g||^2 = (1/N^2) sum_i (1 - p_i) ||g_i||^2 / p_i exactly,
        with the per-example gradient norms plugged into the formula.
        """
        net = Network.from_arch("dense:5,dense:2", (6,), seed=7)
        cfg = NeuronConfig(decay=0.5, time_steps=2)
        x, y = spike_batch(16, 2, 6, 2, 8)
        grads, _ = per_example_gradients(net, x, y, cfg)
        norms = np.sqrt(sum((g.reshape(16, -1) ** 2).sum(axis=1) for g in grads))
        p = np.clip(solve_probabilities(norms + 1e-9, 8).probabilities, 1e-9, 1)
        analytic = variance_formula(norms, p, 16)
        stats = estimator_stats(net, x, y, cfg, p, draws=20000, seed=9)
        assert stats.expected_sq_error == pytest.approx(analytic, rel=0.05)

    def test_rejects_zero_draws(self):
        net = Network.from_arch("dense:3", (4,), seed=0)
        cfg = NeuronConfig(decay=0.5, time_steps=1)
        with pytest.raises(ValueError):
            estimator_stats(net, np.zeros((2, 1, 4)), np.zeros(2, dtype=int),
                            cfg, np.ones(2), draws=0)


class TestPearson:
    def test_perfect_linear(self):
        x = np.arange(10.0)
        assert pearson(x, 3.0 * x + 2.0) == pytest.approx(1.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_known_value(self):
        # Hand-checkable: r = 33 / sqrt(10 * 113.2)
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        y = np.array([2.0, 1.0, 4.0, 3.0, 10.0])
        xd, yd = x - x.mean(), y - y.mean()
        expected = (xd * yd).sum() / np.sqrt((xd ** 2).sum() * (yd ** 2).sum())
        assert pearson(x, y) == pytest.approx(expected, abs=1e-12)

    def test_constant_input_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson(np.ones(5), np.arange(5.0))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pearson(np.ones(3), np.ones(4))


class TestCappedSimplexProjection:
    def test_feasible_point_unchanged(self):
        v = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(project_to_capped_simplex(v, 1.0), v, atol=1e-9)

    def test_constraints_satisfied(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            n = int(rng.integers(3, 40))
            v = rng.normal(0, 2, n)
            s = float(rng.uniform(0.5, n - 0.5))
            p = project_to_capped_simplex(v, s)
            assert p.min() >= -1e-9 and p.max() <= 1.0 + 1e-9
            assert p.sum() == pytest.approx(s, abs=1e-6)


class TestFdCheck:
    def test_dense_network(self):
        net = Network.from_arch("dense:6,dense:3", (8,), seed=10)
        cfg = NeuronConfig(decay=0.7, reset_detached=False, time_steps=3)
        x, y = spike_batch(4, 3, 8, 3, 11)
        assert fd_gradient_check(net, x, y, cfg, trials=30, seed=12) <= 1e-4

    def test_rejects_bad_epsilon(self):
        net = Network.from_arch("dense:3", (4,), seed=0)
        cfg = NeuronConfig(decay=0.5, time_steps=1)
        with pytest.raises(ValueError):
            fd_gradient_check(net, np.zeros((1, 1, 4)), np.zeros(1, dtype=int),
                              cfg, epsilon=1.0)


class TestMeasureCorrelations:
    def test_reports_valid_coefficients(self):
        net = Network.from_arch("dense:10,dense:4", (12,), seed=13)
        cfg = NeuronConfig(decay=0.3, time_steps=4)
        x, y = spike_batch(64, 4, 12, 4, 14)
        rep = measure_correlations(net, x, y, cfg)
        assert -1.0 <= rep.score_vs_norm <= 1.0
        assert -1.0 <= rep.loss_vs_norm <= 1.0
        assert rep.sample_size == 64
