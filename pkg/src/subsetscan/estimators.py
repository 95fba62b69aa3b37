"""Scikit-learn style front end for both scans."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .gp import FitConfig, PointDataset
from .gpss import GpssConfig, GpssScanner, gpss_scan
from .inference import GaussianNull, PoissonNull, RandomizationConfig, attach_p_values, randomization_test
from .mdts import MdtsConfig, mdts_max_score, mdts_scan
from .tensor import CaseTensor, CPConfig, aggregate_records, cp_decompose
from .validation import check_case_data, check_point_data, check_random_seed


def select_clusters(results, overlaps):
    """Greedy non-overlapping selection from score-ranked results.

    ``overlaps(a, b)`` decides whether two results share any cell.
    """
    chosen = []
    for r in results:
        if not any(overlaps(r, c) for c in chosen):
            chosen.append(r)
    return chosen


def _subsets_overlap(a, b):
    return bool(set(a.subset) & set(b.subset))


def _subspaces_overlap(a, b):
    return all(set(u) & set(v) for u, v in zip(a.subspace.values, b.subspace.values))


def _labels_from(clusters, n, membership):
    labels = np.full(n, -1)
    for cid in range(len(clusters) - 1, -1, -1):
        labels[membership(clusters[cid])] = cid
    return labels


class GaussianProcessSubsetScan(BaseEstimator):
    """Subset scan for correlated real-valued responses under a GP null.

    Parameters
    ----------
    k : int, default 10
        Neighborhood size (a point plus its k - 1 nearest neighbors).
    metric : str, default "standardized_euclidean"
    k_exhaustive : int, default 15
        Largest neighborhood searched by full enumeration.
    restarts : int, default 50
        Random restarts of the iterative search (larger neighborhoods only).
    two_sided : bool, default True
    penalty : float, default 0.0
        Per-point cost subtracted from the score.
    transform : {"none", "sqrt"}, default "none"
    n_starts : int, default 5
        Hyperparameter optimizer starts.
    replicas : int, default 200
        Randomization replicas; 0 skips significance testing.
    alpha : float, default 0.05
    refit_per_replica : bool, default False
        Refit the GP hyperparameters on every replica.
    max_clusters : int, default 10
        Most significant clusters extracted one after another.
    random_state : int, default 0

    Attributes
    ----------
    model_ : GPModel
    results_ : list of GpssScanResult
        All distinct neighborhood optima, ranked.
    clusters_ : list of GpssScanResult
        Clusters found sequentially: each significant cluster's points are
        treated as unobserved before rescanning, so points next to a strong
        cluster are not scored against expectations it inflated.  The
        first non-significant cluster ends the list.  Without replicas this
        is a greedy non-overlapping selection from ``results_``.
    null_distribution_ : NullDistribution or None
    labels_ : ndarray of int
        Index into ``clusters_`` of the significant cluster covering each
        point, -1 elsewhere.
    """

    def __init__(self, k=10, metric="standardized_euclidean", k_exhaustive=15, restarts=50, two_sided=True,
                 penalty=0.0, transform="none", n_starts=5, replicas=200, alpha=0.05, refit_per_replica=False,
                 max_clusters=10, random_state=0):
        self.k = k
        self.metric = metric
        self.k_exhaustive = k_exhaustive
        self.restarts = restarts
        self.two_sided = two_sided
        self.penalty = penalty
        self.transform = transform
        self.n_starts = n_starts
        self.replicas = replicas
        self.alpha = alpha
        self.refit_per_replica = refit_per_replica
        self.max_clusters = max_clusters
        self.random_state = random_state

    def _config(self, seed):
        return GpssConfig(
            k=self.k, metric=self.metric, k_exhaustive=self.k_exhaustive, restarts=self.restarts,
            two_sided=self.two_sided, penalty=self.penalty, transform=self.transform, seed=seed,
            fit=FitConfig(n_starts=self.n_starts, seed=seed),
        )

    def fit(self, X, y, observed=None, meta=None):
        seed = check_random_seed(self.random_state)
        X, y, observed = check_point_data(X, y, observed)
        data = PointDataset(X, y, observed, meta=dict(meta or {}))
        config = self._config(seed)
        results, scanner = gpss_scan(data, config=config)
        self.scanner_ = scanner
        self.model_ = scanner.model
        self.data_ = scanner.data
        self.results_ = results
        self.null_distribution_ = None
        if self.replicas:
            replica_config = GpssConfig(**{**config.__dict__, "transform": "none"})
            if self.refit_per_replica:
                def scan(y_rep):
                    return gpss_scan(scanner.data.with_responses(y_rep), config=replica_config)[1].max_score(y_rep)
            else:
                scan = scanner.max_score
            rc = RandomizationConfig(self.replicas, self.alpha, seed, self.refit_per_replica)
            self.null_distribution_ = randomization_test(scan, GaussianNull(scanner.model, scanner.data), rc)
            attach_p_values(results, self.null_distribution_)
            self.clusters_ = self._sequential_clusters(results, config)
        else:
            self.clusters_ = select_clusters(results, _subsets_overlap)
        sig = [c for c in self.clusters_ if c.p_value is not None and c.p_value <= self.alpha]
        self.labels_ = _labels_from(sig, data.n, lambda c: list(c.subset))
        return self

    def _sequential_clusters(self, results, config):
        data, null = self.data_, self.null_distribution_
        clusters = [results[0]]
        observed = data.observed.copy()
        while clusters[-1].p_value <= self.alpha and len(clusters) < self.max_clusters:
            observed[list(clusters[-1].subset)] = False
            if observed.sum() < 1:
                break
            rest = GpssScanner(self.model_, replace(data, observed=observed), config).scan()
            clusters.append(attach_p_values(rest[:1], null)[0])
        return clusters

    def fit_predict(self, X, y, observed=None, meta=None):
        return self.fit(X, y, observed, meta).labels_

    def decision_function(self, X=None):
        """Best score of any reported subset containing each training point."""
        if not hasattr(self, "results_"):
            raise NotFittedError("call fit first")
        out = np.zeros(self.data_.n)
        for r in self.results_:
            idx = list(r.subset)
            out[idx] = np.maximum(out[idx], r.score)
        return out

    def expected_(self):
        """Leave-one-out predictive mean at every point (missing points get the model mean)."""
        prec = self.scanner_.precision
        out = np.full(self.data_.n, self.model_.mean_const)
        g = prec.whitened_residual(self.data_.y)
        idx = prec.index
        out[idx] = self.data_.y[idx] - g / np.diag(prec.Q)
        return out


class MultidimensionalTensorScan(BaseEstimator):
    """Subset scan over Cartesian subspaces of discrete attributes.

    Parameters
    ----------
    rank : int, default 5
        CP rank of the baseline.
    restarts : int, default 50
    replicas : int, default 200
        Randomization replicas; 0 skips significance testing.
    alpha : float, default 0.05
    window : int or None
        Trailing-window length for prospective scans; requires
        ``time_attribute``.
    time_attribute : int or None
    refit_per_replica : bool, default False
        Refit the baseline on every replica.
    max_sweeps : int, default 500
    random_state : int, default 0

    Attributes
    ----------
    baseline_ : BaselineTensor
    results_, clusters_, null_distribution_, labels_
        As for :class:`GaussianProcessSubsetScan`; labels index records.
    """

    def __init__(self, rank=5, restarts=50, replicas=200, alpha=0.05, window=None, time_attribute=None,
                 refit_per_replica=False, max_sweeps=500, random_state=0):
        self.rank = rank
        self.restarts = restarts
        self.replicas = replicas
        self.alpha = alpha
        self.window = window
        self.time_attribute = time_attribute
        self.refit_per_replica = refit_per_replica
        self.max_sweeps = max_sweeps
        self.random_state = random_state

    def fit(self, X, y=None, arities=None, names=None, baseline=None):
        X, y, arities = check_case_data(X, y, arities)
        names = names or [f"attr{a}" for a in range(len(arities))]
        tensor = aggregate_records(X, y, list(zip(names, arities)), time_attribute=self.time_attribute)
        return self.fit_tensor(tensor, baseline, record_values=X)

    def fit_tensor(self, tensor: CaseTensor, baseline=None, record_values=None):
        """Scan an aggregated tensor; ``labels_`` index ``record_values`` (default: the tensor cells)."""
        seed = check_random_seed(self.random_state)
        cp = CPConfig(max_sweeps=self.max_sweeps, seed=seed)
        base = baseline if baseline is not None else cp_decompose(tensor, self.rank, cp)
        time_attr = self.time_attribute if self.time_attribute is not None else tensor.time_attribute
        config = MdtsConfig(restarts=self.restarts, seed=seed, time_attribute=time_attr, window=self.window)
        results = mdts_scan(tensor, base, config=config)
        self.tensor_ = tensor
        self.baseline_ = base
        self.results_ = results
        self.null_distribution_ = None
        if self.replicas:
            if self.refit_per_replica and baseline is None:
                def scan(t):
                    return mdts_max_score(t, cp_decompose(t, self.rank, cp), config)
            else:
                def scan(t):
                    return mdts_max_score(t, base, config)
            rc = RandomizationConfig(self.replicas, self.alpha, seed, self.refit_per_replica)
            self.null_distribution_ = randomization_test(scan, PoissonNull(base, tensor), rc)
            attach_p_values(results, self.null_distribution_)
        self.clusters_ = select_clusters(results, _subspaces_overlap)
        sig = [c for c in self.clusters_ if c.p_value is not None and c.p_value <= self.alpha]
        values = tensor.values if record_values is None else record_values
        self.labels_ = _labels_from(sig, values.shape[0], lambda c: c.subspace.contains(values))
        return self

    def fit_predict(self, X, y=None, arities=None, names=None, baseline=None):
        return self.fit(X, y, arities, names, baseline).labels_
