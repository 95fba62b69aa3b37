import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subsetscan.exceptions import ConfigError, DecompositionError, ScanError
from subsetscan.gp import GPModel, PointDataset, kernel_matrix
from subsetscan.inference import (
    GaussianNull,
    NullDistribution,
    PoissonNull,
    RandomizationConfig,
    attach_p_values,
    generate_null_replica,
    null_model_for,
    randomization_test,
)
from subsetscan.tensor import BaselineTensor, aggregate_records, baseline_from_factors


def flat_baseline(shape, level, floor=0.0):
    b = baseline_from_factors([level], [np.ones(n) for n in shape])
    return BaselineTensor(b.weights, b.factors, floor)


class TestReplicas:
    def test_poisson_mean(self):
        base = flat_baseline((10, 100), 4.0)
        t = generate_null_replica(base, seed=11, template=aggregate_records(np.empty((0, 2), int), None, [10, 100]))
        assert 3.8 <= t.total / 1000 <= 4.2

    def test_floor_only_is_nearly_empty(self):
        base = BaselineTensor(np.array([0.0]), (np.full((5, 1), 0.2), np.full((4, 1), 0.25)), 1e-9)
        assert PoissonNull(base).sample(np.random.default_rng(0)).total == 0

    def test_gaussian_covariance(self):
        model = GPModel(2.0, 1.0, (1.5,), 0.2)
        X = np.array([[0.0], [0.5], [1.0], [3.0], [7.0]])
        data = PointDataset(X, np.zeros(5))
        null = GaussianNull(model, data)
        Y = np.array([null.sample(np.random.default_rng(s)) for s in range(500)])
        want = kernel_matrix(model, X) + 0.2 * np.eye(5)
        assert np.abs(np.cov(Y.T) - want).max() < 0.15
        assert np.abs(Y.mean(axis=0) - 2.0).max() < 0.2

    def test_gaussian_keeps_missing_mask(self):
        data = PointDataset(np.arange(4.0)[:, None], [1.0, np.nan, 2.0, 3.0])
        y = GaussianNull(GPModel(0.0, 1.0, (1.0,), 0.1), data).sample(np.random.default_rng(0))
        assert np.isnan(y[1]) and np.isfinite(y[[0, 2, 3]]).all()

    def test_deterministic_in_seed(self):
        base = flat_baseline((3, 3), 2.0)
        a = generate_null_replica(base, 5, template=aggregate_records(np.empty((0, 2), int), None, [3, 3]))
        b = generate_null_replica(base, 5, template=aggregate_records(np.empty((0, 2), int), None, [3, 3]))
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.counts, b.counts)

    def test_unknown_null_model(self):
        with pytest.raises(ConfigError):
            null_model_for(object(), None)


class TestNullDistribution:
    def test_p_value_conventions(self):
        nd = NullDistribution.from_maxima([1.0, 2.0, 3.0, 4.0], alpha=0.25)
        assert nd.p_value(5.0) == pytest.approx(1 / 5)
        assert nd.p_value(0.0) == 1.0
        assert nd.p_value(3.0) == pytest.approx(3 / 5)

    def test_threshold_order_statistic(self):
        m = np.arange(1.0, 100.0)
        nd = NullDistribution.from_maxima(m, alpha=0.05)
        assert nd.threshold == 95.0  # ceil(0.95 * 99) = 95th smallest
        assert nd.significant(96.0) and not nd.significant(95.0)

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=50), st.floats(0, 100), st.floats(0, 10))
    def test_p_monotone_in_score(self, maxima, s, ds):
        nd = NullDistribution.from_maxima(maxima, alpha=0.5)
        assert nd.p_value(s + ds) <= nd.p_value(s)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            RandomizationConfig(alpha=1.5)
        with pytest.raises(ConfigError):
            RandomizationConfig(replicas=0)
        with pytest.raises(ConfigError, match="at least 19"):
            RandomizationConfig(replicas=9, alpha=0.05)


class TestRandomizationTest:
    def test_identical_seeds_identical_null(self):
        base = flat_baseline((4, 4), 1.0)
        null = PoissonNull(base)
        cfg = RandomizationConfig(replicas=19, seed=3)
        a = randomization_test(lambda t: float(t.total), null, cfg)
        b = randomization_test(lambda t: float(t.total), null, cfg)
        np.testing.assert_array_equal(a.max_scores, b.max_scores)

    def test_replica_seeds_are_offsets(self):
        base = flat_baseline((4, 4), 1.0)
        nd = randomization_test(lambda t: float(t.total), PoissonNull(base), RandomizationConfig(19, seed=100))
        direct = PoissonNull(base).sample(np.random.default_rng(107)).total
        assert nd.max_scores[7] == direct

    def test_errors_carry_replica_index(self):
        calls = []

        def scan(_):
            calls.append(1)
            if len(calls) == 3:
                raise DecompositionError("singular")
            return 0.0

        with pytest.raises(ScanError, match="replica 2") as info:
            randomization_test(scan, PoissonNull(flat_baseline((2,), 1.0)), RandomizationConfig(19))
        assert info.value.where == 2

    def test_attach_p_values(self):
        class R:
            def __init__(self, score):
                self.score, self.p_value = score, None

        nd = NullDistribution.from_maxima([1.0, 2.0, 3.0], alpha=0.5)
        out = attach_p_values([R(10.0), R(2.0)], nd)
        assert [r.p_value for r in out] == [0.25, 0.75]
