"""Prospective surveillance replay over a time-binned case tensor.

At each step the baseline is fit only on bins before the scan window, the
window is scanned with trailing-window time subsets, and significance comes
from replicas of that history-based baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .inference import PoissonNull, RandomizationConfig, randomization_test
from .mdts import MdtsConfig, Subspace, mdts_max_score, mdts_scan
from .tensor import BaselineTensor, CaseTensor, CPConfig, aggregate_records, cp_decompose

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReplayConfig:
    """Settings for :func:`replay`.

    ``persistence`` is the number of consecutive significant steps, with
    overlapping non-time subspaces, needed before a cluster is reported.
    ``start`` / ``stop`` bound the replayed bins (``stop`` exclusive).
    With ``refit_per_replica`` each replica simulates history and window
    together and refits the baseline, so the null accounts for estimating
    the baseline from a short history.
    """

    window: int = 4
    min_history: int = 2
    rank: int = 5
    restarts: int = 50
    replicas: int = 200
    alpha: float = 0.05
    persistence: int = 1
    refit_per_replica: bool = True
    seed: int = 0
    start: int | None = None
    stop: int | None = None
    cp: CPConfig = field(default_factory=CPConfig)

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.min_history < 2:
            raise ConfigError("at least 2 bins of history are required")
        if self.persistence < 1:
            raise ConfigError("persistence must be >= 1")


@dataclass
class ReplayStep:
    step: int
    label: str
    subspace: Subspace
    score: float
    effect: float
    support: tuple
    p_value: float
    significant: bool
    detection: bool = False


@dataclass
class ReplayReport:
    steps: list
    detections: list

    @property
    def first_detection(self):
        """Bin index of the first reported cluster, or None."""
        return self.detections[0].step if self.detections else None


def _split_time(tensor: CaseTensor):
    ta = tensor.time_attribute
    if ta is None:
        raise ConfigError("replay needs a tensor with a time attribute")
    rest = [a for a in range(len(tensor.attributes)) if a != ta]
    return ta, rest


def window_tensor(tensor: CaseTensor, t: int, window: int) -> CaseTensor:
    """Records in bins ``t - window + 1 .. t``, time re-indexed to ``0 .. window - 1``."""
    ta, _ = _split_time(tensor)
    lo = t - window + 1
    if lo < 0 or t >= tensor.arities[ta]:
        raise ConfigError(f"window ending at bin {t} does not fit the time axis")
    keep = (tensor.values[:, ta] >= lo) & (tensor.values[:, ta] <= t)
    vals = tensor.values[keep].copy()
    vals[:, ta] -= lo
    attrs = list(tensor.attributes)
    attrs[ta] = (attrs[ta][0], window)
    labels = None
    if tensor.labels:
        labels = list(tensor.labels)
        labels[ta] = list(tensor.labels[ta][lo : t + 1])
        labels = tuple(labels)
    return aggregate_records(vals, tensor.counts[keep], tuple(attrs), labels=labels, time_attribute=ta)


def history_baseline(tensor: CaseTensor, t: int, window: int, rank: int = 5, cp: CPConfig | None = None) -> BaselineTensor:
    """Per-bin expectations for the window ending at ``t``, fit on bins before it.

    The history is collapsed over time, decomposed, and spread evenly over
    the ``window`` bins at the average per-bin rate.
    """
    ta, rest = _split_time(tensor)
    n_hist = t - window + 1
    if n_hist < 2:
        raise ConfigError(f"step {t}: {max(n_hist, 0)} bins of history, need at least 2")
    keep = tensor.values[:, ta] < n_hist
    hist = aggregate_records(
        tensor.values[keep][:, rest], tensor.counts[keep], tuple(tensor.attributes[a] for a in rest)
    )
    fit = cp_decompose(hist, rank, cp)
    factors = list(fit.factors)
    factors.insert(ta, np.full((window, fit.rank), 1.0 / window))
    return BaselineTensor(
        weights=fit.weights * window / n_hist,
        factors=tuple(factors),
        floor=fit.floor / n_hist,
        converged=fit.converged,
        history=fit.history,
    )


class _StreamNull:
    """Replicas of history plus window drawn from the fitted per-bin rate."""

    def __init__(self, base: BaselineTensor, n_hist: int, window: int, template: CaseTensor):
        ta = template.time_attribute
        n = n_hist + window
        factors = list(base.factors)
        factors[ta] = np.full((n, base.rank), 1.0 / n)
        self.base = BaselineTensor(base.weights * n / window, tuple(factors), base.floor)
        attrs = list(template.attributes)
        attrs[ta] = (attrs[ta][0], n)
        self.attributes = tuple(attrs)
        self.ta = ta

    def sample(self, rng):
        return self.base.sample(rng, self.attributes, time_attribute=self.ta)


def _step_seed(seed, t):
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def _overlap(S1: Subspace, S2: Subspace, skip):
    return all(set(a) & set(b) for i, (a, b) in enumerate(zip(S1.values, S2.values)) if i != skip)


def replay(tensor: CaseTensor, config: ReplayConfig | None = None) -> ReplayReport:
    """Step through the time bins as if each had just arrived.

    Raises
    ------
    ConfigError
        If the first step would have fewer than ``min_history`` history bins.
    """
    config = config or ReplayConfig()
    ta, _ = _split_time(tensor)
    n_bins = tensor.arities[ta]
    first = config.min_history + config.window - 1
    start = first if config.start is None else config.start
    if start - config.window + 1 < config.min_history:
        raise ConfigError(
            f"replay from bin {start} leaves {max(start - config.window + 1, 0)} history bins; "
            f"need {config.min_history}"
        )
    stop = n_bins if config.stop is None else min(config.stop, n_bins)
    time_labels = tensor.labels[ta] if tensor.labels else None
    mcfg = MdtsConfig(restarts=config.restarts, time_attribute=ta, window=config.window)
    steps, detections = [], []
    run = 0
    for t in range(start, stop):
        seed = _step_seed(config.seed, t)
        win = window_tensor(tensor, t, config.window)
        base = history_baseline(tensor, t, config.window, config.rank, config.cp)
        cfg = MdtsConfig(**{**mcfg.__dict__, "seed": seed})
        if len(win):
            top = mdts_scan(win, base, config=cfg)[0]
        else:
            top = None
        rc = RandomizationConfig(config.replicas, config.alpha, seed, config.refit_per_replica)
        if config.refit_per_replica:
            end = t

            def scan(rep):
                w = window_tensor(rep, end, config.window)
                if not len(w):
                    return 0.0
                return mdts_max_score(w, history_baseline(rep, end, config.window, config.rank, config.cp), cfg)

            null = randomization_test(scan, _StreamNull(base, t - config.window + 1, config.window, win), rc)
        else:
            null = randomization_test(
                lambda rep: mdts_max_score(rep, base, cfg) if len(rep) else 0.0, PoissonNull(base, win), rc
            )
        if top is None:
            S = Subspace.full(win.arities)
            score, effect, support = 0.0, 1.0, (0.0, base.total_mass)
        else:
            S, score, effect, support = top.subspace, top.score, top.effect, top.support
        p = null.p_value(score)
        sig = bool(p <= config.alpha)
        prev = steps[-1] if steps else None
        if sig and prev is not None and prev.significant and _overlap(prev.subspace, S, ta):
            run += 1
        else:
            run = 1 if sig else 0
        label = str(time_labels[t]) if time_labels else str(t)
        step = ReplayStep(t, label, S, score, effect, support, p, sig)
        # report once per persistent run
        if run == config.persistence:
            step.detection = True
            detections.append(step)
        steps.append(step)
        logger.info("replay step %d: score %.3f p %.3f%s", t, score, p, " *" if step.detection else "")
    return ReplayReport(steps, detections)

