"""Outer Monte Carlo loops that measure the size of the randomization tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gp import FitConfig
from .gpss import GpssConfig, gpss_scan
from .inference import GaussianNull, PoissonNull, RandomizationConfig, randomization_test
from .mdts import MdtsConfig, mdts_max_score, mdts_scan
from .synth import GridShape, TensorShape, synth_generate
from .tensor import CPConfig, cp_decompose

#: Reduced-scale null shapes used for calibration runs.
GPSS_NULL_SHAPE = GridShape(n_locations=6, n_times=10)
MDTS_NULL_SHAPE = TensorShape(
    arities=(4, 5, 6),
    level=2.0,
    profiles=((1.0, 2.0, 3.0, 2.0), (3.0, 1.0, 1.0, 2.0, 2.0), (1.0, 1.0, 2.0, 2.0, 3.0, 3.0)),
)


@dataclass
class CalibrationReport:
    p_values: np.ndarray
    alpha: float

    @property
    def trials(self):
        return self.p_values.size

    @property
    def rate(self):
        """Fraction of null trials whose top cluster was declared significant."""
        return float(np.mean(self.p_values <= self.alpha))

    def summary(self):
        q = np.quantile(self.p_values, [0.1, 0.25, 0.5, 0.75, 0.9])
        return {
            "trials": int(self.trials),
            "alpha": self.alpha,
            "rate": self.rate,
            "p_quantiles": {k: float(v) for k, v in zip(("10%", "25%", "50%", "75%", "90%"), q)},
        }


def gpss_null_trial(trial, replicas=99, alpha=0.05, k=6, shape=GPSS_NULL_SHAPE, refit=True, n_starts=1):
    """p-value of the top GPSS cluster on one null grid draw.

    With ``refit`` the GP hyperparameters are re-estimated on every
    replica, matching how they were estimated on the observed draw.
    """
    sd = synth_generate(None, shape, seed=trial)
    cfg = GpssConfig(k=k, seed=trial, fit=FitConfig(n_starts=n_starts, seed=trial))
    results, scanner = gpss_scan(sd.data, config=cfg)
    if refit:
        def scan(y):
            return gpss_scan(scanner.data.with_responses(y), config=cfg)[1].max_score(y)
    else:
        scan = scanner.max_score
    rc = RandomizationConfig(replicas, alpha, seed=10_000 + trial, refit_per_replica=refit)
    null = randomization_test(scan, GaussianNull(scanner.model, scanner.data), rc)
    return null.p_value(results[0].score)


def mdts_null_trial(trial, replicas=99, alpha=0.05, shape=MDTS_NULL_SHAPE, rank=1, restarts=10, refit=True):
    """p-value of the top MDTS cluster on one null tensor draw."""
    sd = synth_generate(None, shape, seed=trial)
    cp = CPConfig(seed=trial)
    base = cp_decompose(sd.data, rank, cp)
    cfg = MdtsConfig(restarts=restarts, seed=trial)
    top = mdts_scan(sd.data, base, config=cfg)[0].score
    if refit:
        def scan(t):
            return mdts_max_score(t, cp_decompose(t, rank, cp), cfg)
    else:
        def scan(t):
            return mdts_max_score(t, base, cfg)
    rc = RandomizationConfig(replicas, alpha, seed=10_000 + trial, refit_per_replica=refit)
    null = randomization_test(scan, PoissonNull(base, sd.data), rc)
    return null.p_value(top)


def empirical_size(trial_fn, trials=200, alpha=0.05, **kwargs) -> CalibrationReport:
    """Run ``trial_fn(trial, alpha=alpha, **kwargs)`` for trials ``0 .. trials - 1``."""
    p = np.array([trial_fn(t, alpha=alpha, **kwargs) for t in range(trials)])
    return CalibrationReport(p, alpha)
