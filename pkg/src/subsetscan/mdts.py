"""Subspace search for the multidimensional tensor scan.

A subspace picks a nonempty set of values for every attribute; a record
belongs to it when each of its values is picked.  The score of a subspace is
the expectation-based Poisson statistic of its aggregates, with ``C`` summed
over member records and ``B`` over all member grid cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .scores import PoissonAggregate, ebp_score, ebp_score_array
from .tensor import BaselineTensor, CaseTensor


@dataclass(frozen=True)
class Subspace:
    """One sorted tuple of value indices per attribute."""

    values: tuple

    def __post_init__(self):
        vals = tuple(tuple(sorted({int(v) for v in s})) for s in self.values)
        if any(len(s) == 0 for s in vals):
            raise ConfigError("every attribute needs a nonempty value subset")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_masks(cls, masks):
        return cls(tuple(tuple(np.flatnonzero(m).tolist()) for m in masks))

    @classmethod
    def full(cls, arities):
        return cls(tuple(tuple(range(n)) for n in arities))

    def masks(self, arities):
        if len(arities) != len(self.values):
            raise ConfigError("subspace and tensor disagree on the number of attributes")
        out = []
        for s, n in zip(self.values, arities):
            if s[-1] >= n:
                raise ConfigError(f"value index {s[-1]} outside arity {n}")
            m = np.zeros(n, dtype=bool)
            m[list(s)] = True
            out.append(m)
        return out

    def n_cells(self):
        return int(np.prod([len(s) for s in self.values]))

    def contains(self, values):
        values = np.asarray(values)
        inside = np.ones(values.shape[0], dtype=bool)
        for a, s in enumerate(self.values):
            inside &= np.isin(values[:, a], s)
        return inside

    def describe(self, tensor: CaseTensor, skip_full=True):
        """Human-readable form such as ``gender ∈ {male}, age ∈ {50-59,60-69}``."""
        parts = []
        for a, ((name, arity), s) in enumerate(zip(tensor.attributes, self.values)):
            if skip_full and len(s) == arity:
                continue
            labels = tensor.labels[a] if tensor.labels else None
            shown = [str(labels[v]) if labels else str(v) for v in s]
            parts.append(f"{name} ∈ {{{','.join(shown)}}}")
        return ", ".join(parts) if parts else "(all records)"


@dataclass
class MdtsScanResult:
    subspace: Subspace
    score: float
    effect: float
    support: tuple
    p_value: float | None = None


@dataclass(frozen=True)
class MdtsConfig:
    restarts: int = 50
    seed: int = 0
    randomize_order: bool = False
    time_attribute: int | None = None
    window: int | None = None
    max_cycles: int = 1000


def subspace_aggregate(tensor: CaseTensor, base: BaselineTensor, S: Subspace) -> PoissonAggregate:
    masks = S.masks(tensor.arities)
    inside = np.ones(len(tensor), dtype=bool)
    for a, m in enumerate(masks):
        inside &= m[tensor.values[:, a]]
    C = float(tensor.counts[inside].sum())
    return PoissonAggregate(C, base.subspace_mass(masks))


class _State:
    """Incremental bookkeeping for one restart."""

    def __init__(self, tensor, base, masks):
        self.tensor = tensor
        self.base = base
        self.masks = [m.copy() for m in masks]
        self.rec_in = [m[tensor.values[:, a]] for a, m in enumerate(self.masks)]
        self.sums = [m @ F for m, F in zip(self.masks, base.factors)]

    def score(self):
        return ebp_score(self.aggregate()).score

    def aggregate(self):
        inside = np.logical_and.reduce(self.rec_in) if self.rec_in else np.ones(len(self.tensor), bool)
        C = float(self.tensor.counts[inside].sum())
        prod = self.base.weights.copy()
        size = 1
        for s, m in zip(self.sums, self.masks):
            prod *= s
            size *= int(m.sum())
        return PoissonAggregate(C, float(prod.sum() + self.base.floor * size))

    def per_value(self, j):
        """(C_v, B_v) for every value of attribute j with the others held fixed."""
        others = [self.rec_in[b] for b in range(len(self.masks)) if b != j]
        inside = np.logical_and.reduce(others) if others else np.ones(len(self.tensor), bool)
        arity = self.masks[j].size
        Cv = np.bincount(
            self.tensor.values[inside, j], weights=self.tensor.counts[inside], minlength=arity
        ).astype(float)
        prod = self.base.weights.copy()
        size = 1
        for b, (s, m) in enumerate(zip(self.sums, self.masks)):
            if b != j:
                prod *= s
                size *= int(m.sum())
        Bv = self.base.factors[j] @ prod + self.base.floor * size
        return Cv, Bv

    def set(self, j, mask):
        self.masks[j] = mask
        self.rec_in[j] = mask[self.tensor.values[:, j]]
        self.sums[j] = mask @ self.base.factors[j]


def _best_prefix(Cv, Bv):
    """LTSS step: best subset is a prefix of values sorted by C_v / B_v.

    Ties in ratio go to the lower value index; among equal-score prefixes
    the longest wins.
    """
    order = np.argsort(-(Cv / Bv), kind="stable")
    scores = ebp_score_array(np.cumsum(Cv[order]), np.cumsum(Bv[order]))
    best = scores.max()
    L = int(np.flatnonzero(scores == best)[-1]) + 1
    mask = np.zeros(Cv.size, dtype=bool)
    mask[order[:L]] = True
    return mask, float(best)


def _best_window(Cv, Bv, window):
    """Best trailing window of length 1..window; ties go to the longer one."""
    arity = Cv.size
    W = min(window, arity)
    scores = ebp_score_array(np.cumsum(Cv[::-1])[:W], np.cumsum(Bv[::-1])[:W])
    best = scores.max()
    L = int(np.flatnonzero(scores == best)[-1]) + 1
    return np.arange(arity) >= arity - L, float(best)


def _conditional_step(state, j, config):
    Cv, Bv = state.per_value(j)
    if config.window is not None and j == config.time_attribute:
        return _best_window(Cv, Bv, config.window)
    return _best_prefix(Cv, Bv)


def ltss_conditional_optimize(
    tensor: CaseTensor, base: BaselineTensor, S: Subspace, j: int, config: MdtsConfig | None = None
) -> Subspace:
    """Exact best value subset for attribute ``j`` given the other attributes' subsets."""
    config = config or MdtsConfig()
    if not 0 <= j < len(tensor.attributes):
        raise ConfigError(f"attribute index {j} out of range")
    state = _State(tensor, base, S.masks(tensor.arities))
    state.set(j, _conditional_step(state, j, config)[0])
    return Subspace.from_masks(state.masks)


def _random_masks(arities, rng, config):
    masks = []
    for a, n in enumerate(arities):
        if config.window is not None and a == config.time_attribute:
            L = int(rng.integers(1, min(config.window, n) + 1))
            masks.append(np.arange(n) >= n - L)
            continue
        m = rng.random(n) < 0.5
        while not m.any():
            m = rng.random(n) < 0.5
        masks.append(m)
    return masks


def _local_search(tensor, base, masks, rng, config):
    state = _State(tensor, base, masks)
    A = len(masks)
    trace = [state.score()]
    for _ in range(config.max_cycles):
        order = rng.permutation(A) if config.randomize_order else range(A)
        start = trace[-1]
        for j in order:
            mask, score = _conditional_step(state, j, config)
            state.set(j, mask)
            trace.append(score)
        if not trace[-1] > start:
            break
    return state, trace


def _check_prospective(tensor, config):
    if config.window is None:
        return
    if config.time_attribute is None:
        raise ConfigError("a trailing window needs config.time_attribute")
    if config.window < 1:
        raise ConfigError("window must be >= 1")


def mdts_scan(tensor: CaseTensor, base: BaselineTensor, restarts: int | None = None, config: MdtsConfig | None = None,
              return_traces: bool = False):
    """Iterated conditional optimization from random restarts.

    Returns the distinct local optima sorted by score (descending), ties
    broken by the canonical subspace order.
    """
    config = config or MdtsConfig()
    restarts = config.restarts if restarts is None else restarts
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    _check_prospective(tensor, config)
    if tuple(base.arities) != tensor.arities:
        raise ConfigError(f"baseline grid {base.arities} does not match tensor {tensor.arities}")
    rng = np.random.default_rng(config.seed)
    found = {}
    traces = []
    for _ in range(restarts):
        masks = _random_masks(tensor.arities, rng, config)
        state, trace = _local_search(tensor, base, masks, rng, config)
        traces.append(trace)
        S = Subspace.from_masks(state.masks)
        if S not in found:
            agg = state.aggregate()
            sv = ebp_score(agg)
            found[S] = MdtsScanResult(S, sv.score, sv.effect, (agg.C, agg.B))
    results = sorted(found.values(), key=lambda r: (-r.score, r.subspace.values))
    if return_traces:
        return results, traces
    return results


def mdts_max_score(tensor, base, config: MdtsConfig | None = None) -> float:
    """Top score only; used for randomization replicas."""
    config = config or MdtsConfig()
    return mdts_scan(tensor, base, config=config)[0].score


def subspace_jaccard(S1: Subspace, S2: Subspace) -> float:
    """Jaccard overlap of the two cell sets (Cartesian products)."""
    inter = 1
    for a, b in zip(S1.values, S2.values):
        inter *= len(set(a) & set(b))
    union = S1.n_cells() + S2.n_cells() - inter
    return inter / union
