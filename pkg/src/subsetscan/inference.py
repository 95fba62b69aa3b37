"""Randomization testing against the fitted null model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ScanError, SubsetScanError
from .gp import GPModel, PointDataset, _total_cov, safe_cholesky
from .tensor import BaselineTensor, CaseTensor


@dataclass(frozen=True)
class RandomizationConfig:
    replicas: int = 200
    alpha: float = 0.05
    seed: int = 0
    refit_per_replica: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if (self.replicas + 1) * self.alpha < 1:
            raise ConfigError(
                f"{self.replicas} replicas cannot reach significance at alpha={self.alpha}; "
                f"use at least {math.ceil(1 / self.alpha) - 1}"
            )


@dataclass(frozen=True)
class NullDistribution:
    max_scores: np.ndarray
    alpha: float
    threshold: float

    @classmethod
    def from_maxima(cls, max_scores, alpha):
        m = np.sort(np.asarray(max_scores, dtype=float))
        if m.size < 1:
            raise ConfigError("need at least one replica maximum")
        rank = math.ceil((1 - alpha) * m.size)
        return cls(max_scores=np.asarray(max_scores, dtype=float), alpha=alpha, threshold=float(m[rank - 1]))

    @property
    def replicas(self):
        return self.max_scores.size

    def p_value(self, score: float) -> float:
        """Add-one empirical p-value ``(1 + #{max >= score}) / (1 + R)``."""
        return (1 + int(np.sum(self.max_scores >= score))) / (1 + self.max_scores.size)

    def significant(self, score: float) -> bool:
        return self.p_value(score) <= self.alpha

    def summary(self):
        m = self.max_scores
        return {
            "replicas": int(m.size),
            "alpha": self.alpha,
            "threshold": self.threshold,
            "mean": float(m.mean()),
            "max": float(m.max()),
        }


class GaussianNull:
    """Null replicas ``y ~ N(m, K + noise I)`` at the observed covariates."""

    def __init__(self, model: GPModel, data: PointDataset):
        self.model = model
        self.data = data
        idx = data.observed_index
        self._chol, _ = safe_cholesky(_total_cov(model, data.X[idx]), model.signal_var)

    def sample(self, rng) -> np.ndarray:
        idx = self.data.observed_index
        y = np.full(self.data.n, np.nan)
        y[idx] = self.model.mean_const + self._chol @ rng.standard_normal(idx.size)
        return y


class PoissonNull:
    """Null replicas with independent ``Poisson(mu(cell))`` counts."""

    def __init__(self, base: BaselineTensor, template: CaseTensor | None = None):
        self.base = base
        self.template = template

    def sample(self, rng) -> CaseTensor:
        t = self.template
        if t is None:
            return self.base.sample(rng)
        return self.base.sample(rng, t.attributes, labels=t.labels, time_attribute=t.time_attribute)


def null_model_for(model, template):
    if isinstance(model, GPModel):
        return GaussianNull(model, template)
    if isinstance(model, BaselineTensor):
        return PoissonNull(model, template)
    if hasattr(model, "sample"):
        return model
    raise ConfigError(f"no null replica generator for {type(model).__name__}")


def generate_null_replica(null, seed: int, template=None):
    """One synthetic response set under the fitted null, deterministic in ``seed``.

    ``null`` is a :class:`GaussianNull`, a :class:`PoissonNull`, or a fitted
    ``GPModel`` / ``BaselineTensor`` together with ``template`` (the
    dataset or tensor whose shape to reproduce).
    """
    if template is not None:
        null = null_model_for(null, template)
    return null.sample(np.random.default_rng(seed))


def randomization_test(scan, null, cfg: RandomizationConfig = RandomizationConfig()) -> NullDistribution:
    """Rescan ``cfg.replicas`` null replicas and collect their maximum scores.

    ``scan`` maps a replica to its maximum score and must use the same
    search settings as the observed scan.  Replica ``i`` uses seed
    ``cfg.seed + i``.
    """
    maxima = np.empty(cfg.replicas)
    for i in range(cfg.replicas):
        replica = null.sample(np.random.default_rng(cfg.seed + i))
        try:
            maxima[i] = scan(replica)
        except SubsetScanError as exc:
            raise ScanError(f"replica {i}: {exc}", where=i) from exc
    return NullDistribution.from_maxima(maxima, cfg.alpha)


def attach_p_values(results, null: NullDistribution):
    """Set ``p_value`` on every result against the max-score null (in place)."""
    for r in results:
        r.p_value = null.p_value(r.score)
    return results
