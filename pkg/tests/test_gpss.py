import numpy as np
import pytest

from subsetscan.exceptions import ConfigError
from subsetscan.gp import FitConfig, GPModel, PointDataset, PosteriorMoments
from subsetscan.gpss import (
    GpssConfig,
    GpssScanner,
    build_neighborhoods,
    gpss_scan,
    scan_neighborhood_exhaustive,
    scan_neighborhood_iterative,
    transform_responses,
)
from subsetscan.scores import GaussianResidualSystem, gaussian_meanshift_score


def moments(Sigma, mu=None):
    Sigma = np.asarray(Sigma, dtype=float)
    n = Sigma.shape[0]
    return PosteriorMoments(np.zeros(n) if mu is None else np.asarray(mu, float), Sigma, np.arange(n))


def hard_instance(rng, k):
    """Correlated Wishart-like covariance with a planted shift on a random half."""
    A = rng.standard_normal((k, k + 2))
    Sigma = A @ A.T / (k + 2) + 0.05 * np.eye(k)
    r = np.linalg.cholesky(Sigma) @ rng.standard_normal(k)
    r[rng.random(k) < 0.4] += 1.5
    return moments(Sigma), r


class TestNeighborhoods:
    def test_collinear_example(self):
        data = PointDataset(np.array([[0.0], [1.0], [10.0]]), np.zeros(3))
        hoods = build_neighborhoods(data, 2, metric="euclidean")
        assert [h.members for h in hoods] == [(0, 1), (1, 0), (2, 1)]

    def test_k_equals_n_covers_everything(self, rng):
        data = PointDataset(rng.normal(size=(7, 2)), np.zeros(7))
        for h in build_neighborhoods(data, 7):
            assert sorted(h.members) == list(range(7))
            assert h.members[0] == h.center

    def test_missing_points_excluded(self, rng):
        obs = np.array([1, 0, 1, 1, 0, 1, 1], dtype=bool)
        data = PointDataset(rng.normal(size=(7, 2)), np.zeros(7), observed=obs)
        hoods = build_neighborhoods(data, 3)
        assert len(hoods) == 5
        assert all(obs[list(h.members)].all() for h in hoods)

    def test_ties_go_to_lowest_index(self):
        data = PointDataset(np.array([[0.0], [-1.0], [1.0]]), np.zeros(3))
        assert build_neighborhoods(data, 2, metric="euclidean")[0].members == (0, 1)

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigError):
            build_neighborhoods(PointDataset(np.arange(3.0)[:, None], np.zeros(3)), k)

    def test_unknown_metric(self):
        with pytest.raises(ConfigError):
            build_neighborhoods(PointDataset(np.arange(3.0)[:, None], np.zeros(3)), 2, metric="cosine")


class TestExhaustive:
    def test_single_point(self):
        mask, sv = scan_neighborhood_exhaustive(moments([[1.0]]), [2.0])
        assert mask.tolist() == [True] and sv.score == pytest.approx(2.0)

    def test_hand_enumerated_example(self):
        mask, sv = scan_neighborhood_exhaustive(moments(np.eye(3)), [3.0, 3.0, -3.0])
        assert mask.tolist() == [True, True, False]
        assert sv.score == pytest.approx(9.0)

    def test_zero_residuals_give_canonical_mask(self):
        mask, sv = scan_neighborhood_exhaustive(moments(np.eye(4)), np.zeros(4))
        assert sv.score == 0.0
        assert mask.tolist() == [True, False, False, False]

    def test_matches_brute_force_with_score_function(self, rng):
        for _ in range(10):
            k = int(rng.integers(2, 8))
            post, r = hard_instance(rng, k)
            mask, sv = scan_neighborhood_exhaustive(post, r)
            best = max(
                gaussian_meanshift_score(GaussianResidualSystem(r, post.Sigma, [(c >> i) & 1 for i in range(k)])).score
                for c in range(1, 2**k)
            )
            assert sv.score == pytest.approx(best, rel=1e-10)

    def test_one_sided(self):
        mask, sv = scan_neighborhood_exhaustive(moments(np.eye(3)), [-3.0, 1.0, -3.0], two_sided=False)
        assert mask.tolist() == [False, True, False] and sv.score == pytest.approx(0.5)

    def test_rejects_huge_neighborhoods(self):
        with pytest.raises(ConfigError):
            scan_neighborhood_exhaustive(moments(np.eye(21)), np.zeros(21))


class TestIterative:
    def test_zero_residuals(self):
        _, sv = scan_neighborhood_iterative(moments(np.eye(5)), np.zeros(5))
        assert sv.score == 0.0

    def test_agrees_with_exhaustive(self, rng):
        hits = 0
        for trial in range(30):
            post, r = hard_instance(rng, int(rng.integers(4, 13)))
            _, ex = scan_neighborhood_exhaustive(post, r)
            _, it = scan_neighborhood_iterative(post, r, restarts=20, seed=trial)
            assert it.score <= ex.score + 1e-9
            hits += it.score >= ex.score - 1e-9
        assert hits >= 28

    @pytest.mark.parametrize("two_sided", [True, False])
    def test_traces_never_decrease(self, rng, two_sided):
        post, r = hard_instance(rng, 12)
        _, _, traces = scan_neighborhood_iterative(post, r, restarts=10, two_sided=two_sided, return_traces=True)
        assert len(traces) == 10
        for t in traces:
            assert np.all(np.diff(t) >= -1e-12)

    def test_deterministic_in_seed(self, rng):
        post, r = hard_instance(rng, 10)
        a = scan_neighborhood_iterative(post, r, seed=3)
        b = scan_neighborhood_iterative(post, r, seed=3)
        assert a[0].tolist() == b[0].tolist() and a[1] == b[1]


def grid_data(rng, shift=0.0, blob=(14, 15, 24, 25)):
    loc, t = np.meshgrid(np.arange(6), np.arange(10), indexing="ij")
    X = np.column_stack([loc.ravel(), t.ravel()]).astype(float)
    y = rng.normal(size=60)
    y[list(blob)] += shift
    return PointDataset(X, y)


class TestScan:
    def test_reported_scores_are_exact(self, rng):
        data = grid_data(rng, shift=3.0)
        results, scanner = gpss_scan(data, config=GpssConfig(k=6, fit=FitConfig(n_starts=2)))
        for res in results[:10]:
            nb = next(h for h in scanner.neighborhoods if h.center == res.neighborhood_center)
            assert set(res.subset) <= set(nb.members)
            post = scanner.precision.moments(list(nb.members), data.y)
            w = np.isin(nb.members, res.subset)
            sv = gaussian_meanshift_score(GaussianResidualSystem(data.y[list(nb.members)] - post.mu, post.Sigma, w))
            assert res.score == pytest.approx(sv.score, abs=1e-12)

    def test_sorted_and_unique(self, rng):
        results, _ = gpss_scan(grid_data(rng), config=GpssConfig(k=5, fit=FitConfig(n_starts=1)))
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)
        assert len({r.subset for r in results}) == len(results)

    def test_finds_strong_blob(self, rng):
        blob = (14, 15, 24, 25)
        results, _ = gpss_scan(grid_data(rng, shift=5.0, blob=blob), config=GpssConfig(k=6, fit=FitConfig(n_starts=2)))
        top = set(results[0].subset)
        assert len(top & set(blob)) / len(top | set(blob)) >= 0.5

    def test_deterministic(self, rng):
        data = grid_data(rng, shift=2.0)
        cfg = GpssConfig(k=5, fit=FitConfig(n_starts=2))
        assert gpss_scan(data, config=cfg)[0] == gpss_scan(data, config=cfg)[0]

    def test_iterative_path_used_for_large_k(self, rng):
        data = grid_data(rng, shift=3.0)
        cfg = GpssConfig(k=8, k_exhaustive=6, restarts=10, fit=FitConfig(n_starts=1))
        results, scanner = gpss_scan(data, config=cfg)
        assert not scanner._exhaustive
        exact = GpssScanner(scanner.model, scanner.data, GpssConfig(k=8, k_exhaustive=8))
        assert results[0].score <= exact.max_score(data.y) + 1e-9

    def test_single_observed_point(self):
        data = PointDataset([[0.0], [1.0]], [3.0, np.nan])
        model = GPModel(1.0, 1.0, (1.0,), 1.0)
        results = GpssScanner(model, data, GpssConfig(k=10)).scan()
        assert len(results) == 1 and results[0].subset == (0,)
        assert results[0].score == pytest.approx((3.0 - 1.0) ** 2 / (2 * 2.0))

    def test_max_score_matches_scan(self, rng):
        data = grid_data(rng)
        results, scanner = gpss_scan(data, config=GpssConfig(k=5, fit=FitConfig(n_starts=1)))
        assert scanner.max_score(data.y) == pytest.approx(results[0].score, rel=1e-9)


def test_sqrt_transform():
    np.testing.assert_allclose(transform_responses([4.0, np.nan, 9.0], "sqrt"), [2.0, np.nan, 3.0])
    with pytest.raises(ConfigError):
        transform_responses([-1.0], "sqrt")
    with pytest.raises(ConfigError):
        transform_responses([1.0], "log")
