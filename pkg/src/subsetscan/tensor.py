"""Case tensors over discrete attributes and their rank-R nonnegative CP baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .exceptions import CellLookupError, ConfigError, IngestionError

logger = logging.getLogger(__name__)

#: Floor on baseline expectations, as a fraction of the mean count per grid cell.
FLOOR_FRACTION = 1e-3


@dataclass(frozen=True)
class CaseTensor:
    """Sparse count tensor: one row of value indices per populated cell.

    ``attributes`` is a tuple of ``(name, arity)`` pairs.  ``labels``
    optionally maps each attribute's value indices back to category labels.
    """

    attributes: tuple
    values: np.ndarray
    counts: np.ndarray
    labels: tuple | None = None
    time_attribute: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def names(self):
        return tuple(a[0] for a in self.attributes)

    @property
    def arities(self):
        return tuple(int(a[1]) for a in self.attributes)

    @property
    def V(self):
        return sum(self.arities)

    @property
    def n_cells(self):
        return math.prod(self.arities)

    @property
    def total(self):
        return int(self.counts.sum())

    def __len__(self):
        return self.counts.size

    def attribute_index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"no attribute named {name!r}") from None


def aggregate_records(values, counts=None, attributes=None, labels=None, time_attribute=None) -> CaseTensor:
    """Merge identical value vectors by summing their counts.

    Parameters
    ----------
    values : array-like of shape (n_records, n_attributes)
        Integer value index per attribute.
    counts : array-like of shape (n_records,), optional
        Nonnegative integer counts; defaults to one case per row.
    attributes : sequence of (name, arity) or of arities
    """
    if attributes is None:
        raise ConfigError("attributes (names and arities) are required")
    attributes = tuple(
        (str(a[0]), int(a[1])) if isinstance(a, (tuple, list)) else (f"attr{i}", int(a))
        for i, a in enumerate(attributes)
    )
    A = len(attributes)
    vals = np.asarray(values, dtype=np.int64)
    if vals.size == 0:
        vals = vals.reshape(0, A)
    if vals.ndim != 2 or vals.shape[1] != A:
        raise IngestionError(f"values must have shape (n, {A}), got {vals.shape}")
    cnt = np.ones(vals.shape[0], dtype=np.int64) if counts is None else np.asarray(counts)
    if cnt.shape != (vals.shape[0],):
        raise IngestionError("counts must have one entry per record")
    if cnt.size and (np.any(cnt < 0) or np.any(cnt != np.round(cnt))):
        raise IngestionError("counts must be nonnegative integers")
    cnt = cnt.astype(np.int64)
    for a, (name, arity) in enumerate(attributes):
        bad = np.flatnonzero((vals[:, a] < 0) | (vals[:, a] >= arity))
        if bad.size:
            raise IngestionError(
                f"attribute {name!r}: value {vals[bad[0], a]} out of range [0, {arity}) at row {bad[0]}"
            )
    if vals.shape[0]:
        uniq, inv = np.unique(vals, axis=0, return_inverse=True)
        summed = np.bincount(inv.ravel(), weights=cnt, minlength=uniq.shape[0]).astype(np.int64)
    else:
        uniq, summed = vals, cnt
    return CaseTensor(attributes, uniq, summed, labels=labels, time_attribute=time_attribute)


@dataclass(frozen=True)
class BaselineTensor:
    """Expected counts ``mu(cell) = sum_r weights[r] * prod_a factors[a][v_a, r] + floor``.

    Factor columns sum to one, so a component's mass is its weight.  The
    additive floor keeps every expectation strictly positive while leaving
    sums over Cartesian subspaces in closed form.
    """

    weights: np.ndarray
    factors: tuple
    floor: float
    converged: bool = True
    history: tuple = ()

    @property
    def rank(self):
        return self.weights.size

    @property
    def arities(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def total_mass(self):
        return float(self.weights.sum() + self.floor * math.prod(self.arities))

    def expected(self, values):
        """Vectorized expectations for an (n, A) array of cells."""
        values = np.asarray(values, dtype=np.int64)
        prod = np.broadcast_to(self.weights, (values.shape[0], self.rank)).copy()
        for a, F in enumerate(self.factors):
            prod *= F[values[:, a]]
        return prod.sum(axis=1) + self.floor

    def subspace_mass(self, masks):
        """Sum of expectations over the Cartesian product of boolean value masks."""
        prod = self.weights.copy()
        size = 1
        for F, m in zip(self.factors, masks):
            prod *= m @ F
            size *= int(m.sum())
        return float(prod.sum() + self.floor * size)

    def dense(self):
        """Full expectation grid; only sensible for small tensors."""
        out = np.full(self.arities, self.floor)
        letters = "abcdefghijklmnopqrstuvwxyz"
        if len(self.factors) > len(letters) - 1:
            raise ConfigError("too many attributes for a dense grid")
        spec = ",".join(f"{letters[a]}z" for a in range(len(self.factors)))
        out += np.einsum(f"z,{spec}->{letters[:len(self.factors)]}", self.weights, *self.factors)
        return out

    def sample(self, rng, attributes=None, labels=None, time_attribute=None) -> CaseTensor:
        """Independent ``Poisson(mu(cell))`` counts for every cell.

        Drawn as a Poisson process: total ~ Poisson(total mass), each case
        assigned to a component, then to one value per attribute, which is
        equivalent to cell-wise sampling without enumerating the grid.
        """
        arities = self.arities
        if attributes is None:
            attributes = tuple((f"attr{a}", n) for a, n in enumerate(arities))
        floor_mass = self.floor * math.prod(arities)
        masses = np.r_[self.weights, floor_mass]
        total = masses.sum()
        n = int(rng.poisson(total))
        comp = rng.choice(masses.size, size=n, p=masses / total)
        vals = np.empty((n, len(arities)), dtype=np.int64)
        for a, F in enumerate(self.factors):
            col = np.empty(n, dtype=np.int64)
            for r in range(masses.size):
                sel = np.flatnonzero(comp == r)
                if not sel.size:
                    continue
                if r == self.rank:
                    col[sel] = rng.integers(0, arities[a], size=sel.size)
                else:
                    col[sel] = rng.choice(arities[a], size=sel.size, p=F[:, r])
            vals[:, a] = col
        return aggregate_records(vals, None, attributes, labels=labels, time_attribute=time_attribute)


@dataclass(frozen=True)
class CPConfig:
    max_sweeps: int = 500
    tol: float = 1e-10
    seed: int = 0
    loss: str = "squared"
    n_init: int = 5


def _gram_product(grams, skip=None):
    R = grams[0].shape[0]
    G = np.ones((R, R))
    for a, g in enumerate(grams):
        if a != skip:
            G *= g
    return G


def _mttkrp(tensor, factors, a):
    R = factors[0].shape[1]
    kr = np.ones((len(tensor), R))
    for b, F in enumerate(factors):
        if b != a:
            kr *= F[tensor.values[:, b]]
    kr *= tensor.counts[:, None]
    out = np.zeros((factors[a].shape[0], R))
    np.add.at(out, tensor.values[:, a], kr)
    return out


def _objective(tensor, factors, grams, y_sq):
    R = factors[0].shape[1]
    fit = np.ones((len(tensor), R))
    for b, F in enumerate(factors):
        fit *= F[tensor.values[:, b]]
    cross = float(tensor.counts @ fit.sum(axis=1))
    return y_sq - 2.0 * cross + float(_gram_product(grams).sum())


def _nnls_rows(G, M):
    """Row-wise ``min_f f'Gf - 2 m'f`` subject to ``f >= 0``."""
    R = G.shape[0]
    ridge = 1e-12 * max(np.trace(G) / R, 1e-300)
    evals, evecs = np.linalg.eigh(G + ridge * np.eye(R))
    evals = np.maximum(evals, ridge)
    A = np.sqrt(evals)[:, None] * evecs.T
    Ainv_t = evecs / np.sqrt(evals)[None, :]
    out = np.empty_like(M)
    for i in range(M.shape[0]):
        out[i], _ = nnls(A, Ainv_t.T @ M[i])
    return out


def _als(tensor, rank, config, rng):
    arities = tensor.arities
    A = len(arities)
    y_sq = float(tensor.counts @ tensor.counts)
    # start near the mean level so the first sweeps are well scaled
    level = (float(tensor.total) / math.prod(arities) / rank) ** (1.0 / A)
    factors = [level * rng.uniform(0.5, 1.5, size=(n, rank)) for n in arities]
    grams = [F.T @ F for F in factors]
    history = [_objective(tensor, factors, grams, y_sq)]
    for _ in range(config.max_sweeps):
        for a in range(A):
            G = _gram_product(grams, skip=a)
            factors[a] = _nnls_rows(G, _mttkrp(tensor, factors, a))
            grams[a] = factors[a].T @ factors[a]
        obj = _objective(tensor, factors, grams, y_sq)
        prev = history[-1]
        history.append(obj)
        if prev - obj <= config.tol * max(prev, y_sq * 1e-300, 1e-300) or obj <= 1e-14 * y_sq:
            return factors, history, True
    return factors, history, False


def cp_decompose(tensor: CaseTensor, rank: int = 5, config: CPConfig | None = None) -> BaselineTensor:
    """Nonnegative CP fit by alternating least squares over the full grid.

    Cells absent from ``tensor`` count as zeros.  Every block update is an
    exact nonnegative least-squares solve, so the squared error never
    increases.  Above rank one, ``config.n_init`` random starts are run and
    the lowest-error fit is kept.  The result is rescaled so the total
    expected mass equals the total observed count.
    """
    config = config or CPConfig()
    if rank < 1:
        raise ConfigError("rank must be >= 1")
    if config.loss != "squared":
        raise ConfigError(f"loss {config.loss!r} is not implemented; only 'squared' is available")
    if len(tensor) == 0 or tensor.total == 0:
        raise ConfigError("cannot decompose an empty tensor")
    if config.n_init < 1:
        raise ConfigError("n_init must be >= 1")
    arities = tensor.arities
    n_cells = math.prod(arities)
    total = float(tensor.total)
    rng = np.random.default_rng(config.seed)
    # components can die at zero under NNLS and stay dead, so keep the best of several starts;
    # one start suffices at rank one
    runs = [_als(tensor, rank, config, rng) for _ in range(config.n_init if rank > 1 else 1)]
    factors, history, converged = min(runs, key=lambda r: r[1][-1])
    if not converged:
        logger.warning("CP decomposition did not converge in %d sweeps", config.max_sweeps)

    weights = np.ones(rank)
    norm = []
    for F in factors:
        s = F.sum(axis=0)
        good = s > 0
        F = np.where(good[None, :], F / np.where(good, s, 1.0)[None, :], 1.0 / F.shape[0])
        weights *= np.where(good, s, 0.0)
        norm.append(F)
    floor0 = FLOOR_FRACTION * total / n_cells
    scale = total / (weights.sum() + floor0 * n_cells)
    return BaselineTensor(
        weights=weights * scale,
        factors=tuple(norm),
        floor=floor0 * scale,
        converged=converged,
        history=tuple(history),
    )


def baseline_lookup(base: BaselineTensor, cell) -> float:
    """Expected count of one cell (always at least ``base.floor``)."""
    cell = np.asarray(cell, dtype=np.int64).ravel()
    ar = base.arities
    if cell.size != len(ar) or np.any(cell < 0) or np.any(cell >= np.asarray(ar)):
        raise CellLookupError(f"cell {cell.tolist()} outside grid {ar}")
    return float(base.expected(cell[None, :])[0])


def baseline_from_factors(weights, factors, floor=0.0) -> BaselineTensor:
    """Build a baseline from unnormalized nonnegative factors (synthetic truths, tests)."""
    weights = np.asarray(weights, dtype=float).copy()
    norm = []
    for F in factors:
        F = np.asarray(F, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        s = F.sum(axis=0)
        weights *= s
        norm.append(F / s[None, :])
    return BaselineTensor(weights=weights, factors=tuple(norm), floor=float(floor))
