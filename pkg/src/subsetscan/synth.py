"""Synthetic datasets with injected clusters of known location."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .exceptions import ConfigError
from .gp import GPModel, PointDataset, sample_responses
from .mdts import Subspace
from .tensor import BaselineTensor, CaseTensor, aggregate_records, baseline_from_factors


@dataclass(frozen=True)
class InjectionSpec:
    """``kind`` is ``"additive-shift"`` (GP data) or ``"multiplicative-risk"`` (case tensors).

    For an additive shift ``region`` is either a sequence of point indices
    or a ball ``{"center": i, "size": m}`` meaning point i and its m - 1
    nearest grid neighbors (standardized Euclidean).  For a multiplicative
    risk it is a :class:`Subspace`.
    """

    kind: str
    region: object
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("additive-shift", "multiplicative-risk"):
            raise ConfigError(f"unknown injection kind {self.kind!r}")
        if not (math.isfinite(self.magnitude) and self.magnitude > 0):
            raise ConfigError("injection magnitude must be positive")
        if self.kind == "multiplicative-risk" and self.magnitude <= 1:
            raise ConfigError("multiplicative risk needs q > 1")


@dataclass(frozen=True)
class GridShape:
    """Locations x time steps, each location on its own integer coordinate."""

    n_locations: int = 6
    n_times: int = 204
    model: GPModel = field(
        default_factory=lambda: GPModel(mean_const=20.0, signal_var=16.0, lengthscales=(2.0, 6.0), noise_var=4.0)
    )
    missing_rate: float = 0.0

    def covariates(self):
        loc, t = np.meshgrid(np.arange(self.n_locations), np.arange(self.n_times), indexing="ij")
        return np.column_stack([loc.ravel(), t.ravel()]).astype(float)


@dataclass(frozen=True)
class TensorShape:
    """Rank-one baseline ``mu(cell) = level * prod_a profile_a[v_a]``.

    Profiles default to flat; ``level`` is the mean count per cell.
    """

    arities: tuple = (10, 10, 20)
    level: float = 2.0
    names: tuple | None = None
    profiles: tuple | None = None
    time_attribute: int | None = None

    def attributes(self):
        names = self.names or tuple(f"attr{a}" for a in range(len(self.arities)))
        return tuple(zip(names, self.arities))

    def baseline(self) -> BaselineTensor:
        profiles = self.profiles or tuple(np.ones(n) for n in self.arities)
        profiles = [np.asarray(p, dtype=float) / np.mean(p) for p in profiles]
        n_cells = math.prod(self.arities)
        base = baseline_from_factors([1.0], profiles)
        return BaselineTensor(
            weights=base.weights * self.level * n_cells / base.weights.sum(),
            factors=base.factors,
            floor=0.0,
        )


@dataclass(frozen=True)
class SynthData:
    data: object
    truth: object
    null_model: object


def ball_region(X, center, size):
    """``center`` plus its ``size - 1`` nearest points by standardized Euclidean distance."""
    sd = X.std(axis=0)
    Z = X / np.where(sd > 0, sd, 1.0)
    d = cdist(Z[[center]], Z)[0]
    order = np.argsort(d, kind="stable")
    order = order[order != center][: size - 1]
    return tuple(sorted([int(center)] + order.tolist()))


def synth_generate(spec: InjectionSpec | None, shape, seed: int | None = None) -> SynthData:
    """Null draw from ``shape`` with ``spec`` injected; returns the exact injected region.

    ``spec=None`` produces a null dataset (empty truth).
    """
    seed = spec.seed if seed is None and spec is not None else (seed or 0)
    rng = np.random.default_rng(seed)
    if isinstance(shape, GridShape):
        return _synth_grid(spec, shape, rng)
    if isinstance(shape, TensorShape):
        return _synth_tensor(spec, shape, rng)
    raise ConfigError(f"unsupported shape {type(shape).__name__}")


def _synth_grid(spec, shape, rng):
    X = shape.covariates()
    observed = rng.random(X.shape[0]) >= shape.missing_rate
    if not observed.any():
        observed[0] = True
    data = PointDataset(X, np.zeros(X.shape[0]), observed)
    y = sample_responses(shape.model, data, rng)
    truth = ()
    if spec is not None:
        if spec.kind != "additive-shift":
            raise ConfigError("grid data supports additive-shift injections only")
        region = spec.region
        if isinstance(region, dict):
            c, m = int(region["center"]), int(region["size"])
            if not (0 <= c < X.shape[0]) or not (1 <= m <= X.shape[0]):
                raise ConfigError("injection ball outside the grid")
            region = ball_region(X, c, m)
        region = tuple(sorted(int(i) for i in region))
        if not region or region[0] < 0 or region[-1] >= X.shape[0]:
            raise ConfigError("injection region outside the grid")
        idx = np.asarray(region)
        y[idx] = y[idx] + spec.magnitude
        truth = tuple(int(i) for i in idx if observed[i])
    return SynthData(PointDataset(X, y, observed), truth, shape.model)


def _synth_tensor(spec, shape, rng):
    base = shape.baseline()
    attrs = shape.attributes()
    tensor = base.sample(rng, attrs, time_attribute=shape.time_attribute)
    truth = None
    if spec is not None:
        if spec.kind != "multiplicative-risk":
            raise ConfigError("tensor data supports multiplicative-risk injections only")
        truth = spec.region
        masks = truth.masks(shape.arities)  # raises on out-of-grid regions
        tensor = inject_risk(tensor, base, truth, spec.magnitude, rng, masks)
    return SynthData(tensor, truth, base)


def inject_risk(tensor: CaseTensor, base: BaselineTensor, region: Subspace, q: float, rng, masks=None) -> CaseTensor:
    """Resample every cell of ``region`` as ``Poisson(q * mu)``."""
    masks = masks or region.masks(tensor.arities)
    keep = ~region.contains(tensor.values)
    cells = np.array(np.meshgrid(*[np.flatnonzero(m) for m in masks], indexing="ij")).reshape(len(masks), -1).T
    new_counts = rng.poisson(q * base.expected(cells))
    vals = np.vstack([tensor.values[keep], cells])
    counts = np.r_[tensor.counts[keep], new_counts]
    nz = counts > 0
    return aggregate_records(
        vals[nz], counts[nz], tensor.attributes, labels=tensor.labels, time_attribute=tensor.time_attribute
    )


def synth_stream(arities, n_bins, level, onset, region_values, q, seed, names=None):
    """Time-binned synthetic stream, risk ``q`` in ``region_values`` from bin ``onset`` on.

    ``arities`` and ``region_values`` cover the non-time attributes only;
    time becomes attribute 0.  Returns the tensor and the per-bin true
    baseline.
    """
    rng = np.random.default_rng(seed)
    names = tuple(names or (f"attr{a}" for a in range(1, len(arities) + 1)))
    shape = TensorShape(arities=(n_bins, *arities), level=level, names=("time", *names), time_attribute=0)
    base = shape.baseline()
    tensor = base.sample(rng, shape.attributes(), time_attribute=0)
    if q is not None and onset < n_bins:
        region = Subspace((tuple(range(onset, n_bins)), *[tuple(v) for v in region_values]))
        tensor = inject_risk(tensor, base, region, q, rng)
    return tensor, base


AGE_DECILES = ("0-9", "10-19", "20-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80+")
GENDERS = ("F", "M")
RACES = ("B", "O", "W")


def case_layout(n_bins, n_zips=10, n_drugs=3, origin="2016-01-04", bin_days=7):
    """Attributes and labels in the victim-record layout (time, zip, age, gender, race, drugs)."""
    start = dt.date.fromisoformat(origin)
    dates = tuple((start + dt.timedelta(days=bin_days * b)).isoformat() for b in range(n_bins))
    zips = tuple(f"{15200 + 3 * z:05d}" for z in range(n_zips))
    drugs = tuple(f"drug_{d:02d}" for d in range(n_drugs))
    labels = (dates, zips, AGE_DECILES, GENDERS, RACES, *[("0", "1")] * n_drugs)
    names = ("time", "zip", "age_decile", "gender", "race", *drugs)
    return tuple((n, len(l)) for n, l in zip(names, labels)), labels


def case_shape(n_bins=26, n_zips=10, n_drugs=3, cases_per_bin=80.0):
    """Rank-one victim-record null with uneven zip, age, race and drug profiles."""
    attributes, _ = case_layout(n_bins, n_zips, n_drugs)
    profiles = (
        np.ones(n_bins),
        np.linspace(1.0, 2.0, n_zips),
        np.array([1, 2, 4, 6, 7, 6, 4, 2, 1], dtype=float),
        np.array([1.0, 2.0]),
        np.array([3.0, 1.0, 6.0]),
        *[np.array([0.9 - 0.3 * d / max(n_drugs, 1), 0.1 + 0.3 * d / max(n_drugs, 1)]) for d in range(n_drugs)],
    )
    n_cells = math.prod(a for _, a in attributes)
    return TensorShape(
        arities=tuple(a for _, a in attributes),
        level=cases_per_bin * n_bins / n_cells,
        names=tuple(n for n, _ in attributes),
        profiles=profiles,
        time_attribute=0,
    )


def synth_cases(n_bins=26, n_zips=10, n_drugs=3, cases_per_bin=80.0, q=None, onset=None, zips=(0, 1),
                ages=(3, 4), seed=0):
    """Labelled case tensor; with ``q`` the risk rises in ``zips`` x ``ages`` from bin ``onset`` on.

    Returns ``(tensor, region, baseline)``; ``region`` is None for a null draw.
    """
    shape = case_shape(n_bins, n_zips, n_drugs, cases_per_bin)
    _, labels = case_layout(n_bins, n_zips, n_drugs)
    rng = np.random.default_rng(seed)
    base = shape.baseline()
    tensor = base.sample(rng, shape.attributes(), labels=labels, time_attribute=0)
    region = None
    if q is not None:
        onset = n_bins - 4 if onset is None else onset
        if not 0 <= onset < n_bins:
            raise ConfigError("onset outside the time axis")
        full = [tuple(range(n)) for n in shape.arities]
        full[0] = tuple(range(onset, n_bins))
        full[1] = tuple(sorted(zips))
        full[2] = tuple(sorted(ages))
        region = Subspace(tuple(full))
        tensor = inject_risk(tensor, base, region, q, rng)
    return tensor, region, base
