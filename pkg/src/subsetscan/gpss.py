"""Neighborhood construction and subset search for the Gaussian process subset scan."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist

from .exceptions import ConfigError, DecompositionError, ScanError
from .gp import FitConfig, GPModel, ObservedPrecision, PointDataset, PosteriorMoments, fit_hyperparameters
from .scores import GaussianResidualSystem, gaussian_meanshift_score

logger = logging.getLogger(__name__)

METRICS = ("standardized_euclidean", "euclidean", "cityblock", "chebyshev")

# Upper bound on (masks x neighborhoods) entries held at once by the batched search.
_BATCH_ENTRIES = 4_000_000


@dataclass(frozen=True)
class Neighborhood:
    center: int
    members: tuple
    metric: str = "standardized_euclidean"


@dataclass
class GpssScanResult:
    subset: tuple
    score: float
    effect: float
    neighborhood_center: int
    p_value: float | None = None


@dataclass(frozen=True)
class GpssConfig:
    k: int = 10
    metric: str = "standardized_euclidean"
    k_exhaustive: int = 15
    restarts: int = 50
    two_sided: bool = True
    penalty: float = 0.0
    transform: str = "none"
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)


def build_neighborhoods(data: PointDataset, k: int, metric: str = "standardized_euclidean"):
    """Each observed point plus its ``k - 1`` nearest observed neighbors.

    Ties in distance go to the lowest dataset index; the center is always
    listed first.
    """
    obs = data.observed_index
    if not (1 <= k <= obs.size):
        raise ConfigError(f"k={k} out of range [1, {obs.size}] (number of observed points)")
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")
    X = data.X[obs]
    if metric == "standardized_euclidean":
        sd = X.std(axis=0)
        X = X / np.where(sd > 0, sd, 1.0)
        dist = cdist(X, X, "euclidean")
    else:
        dist = cdist(X, X, metric)
    hoods = []
    for p, center in enumerate(obs):
        order = np.argsort(dist[p], kind="stable")
        order = order[order != p][: k - 1]
        members = (int(center),) + tuple(int(obs[q]) for q in order)
        hoods.append(Neighborhood(center=int(center), members=members, metric=metric))
    return hoods


@lru_cache(maxsize=32)
def _all_masks(k):
    codes = np.arange(1, 2**k, dtype=np.int64)
    return ((codes[:, None] >> np.arange(k)) & 1).astype(float)


@lru_cache(maxsize=32)
def _mask_pairs(k):
    M = _all_masks(k)
    return np.einsum("mi,mj->mij", M, M).reshape(M.shape[0], k * k)


def _score_from_ab(a, b, two_sided):
    s = a * a / (2.0 * b)
    if not two_sided:
        s = np.where(a < 0, 0.0, s)
    return s


def _precision_system(post: PosteriorMoments, y_S):
    r = np.asarray(y_S, dtype=float) - post.mu
    try:
        c = cho_factor(post.Sigma, lower=True)
    except (LinAlgError, ValueError) as exc:
        raise DecompositionError(f"posterior covariance not positive definite: {exc}") from exc
    P = cho_solve(c, np.eye(r.size))
    return r, 0.5 * (P + P.T), cho_solve(c, r)


def _exhaustive_best(P, h, two_sided, penalty):
    M = _all_masks(h.size)
    a = M @ h
    b = np.einsum("mi,mi->m", M @ P, M)
    s = _score_from_ab(a, b, two_sided) - penalty * M.sum(axis=1)
    j = int(np.argmax(s))
    return M[j].astype(bool), float(s[j])


def scan_neighborhood_exhaustive(post: PosteriorMoments, y_S, two_sided: bool = True, penalty: float = 0.0):
    """Exact best subset of a neighborhood by enumerating all nonempty masks.

    Among equal scores the mask with the smallest binary code (member 0 is
    the least significant bit) wins.
    """
    r, P, h = _precision_system(post, y_S)
    if r.size > 20:
        raise ConfigError(f"exhaustive search over k={r.size} points is not supported; use the iterative scan")
    mask, _ = _exhaustive_best(P, h, two_sided, penalty)
    score = gaussian_meanshift_score(GaussianResidualSystem(r, post.Sigma, mask), two_sided, penalty)
    return mask, score


def _coordinate_ascent(P, h, w, two_sided, penalty, beta_fallback, max_iter=1000):
    """Alternate shift estimation and greedy bit flips at a fixed shift."""
    Pdiag = np.diag(P).copy()
    w = w.copy()
    Pw = P @ w
    a, b = float(w @ h), float(w @ Pw)

    def score(a, b):
        base = a * a / (2 * b) if (two_sided or a >= 0) else 0.0
        return base - penalty * w.sum()

    trace = [score(a, b)]
    for _ in range(max_iter):
        beta = a / b
        if not two_sided and beta <= 0:
            beta = 0.0
        if beta == 0.0:
            beta = beta_fallback
        if beta == 0.0:
            break
        flipped = False
        while True:
            s = np.where(w > 0, -1.0, 1.0)
            c = s * beta * (h - beta * Pw) - 0.5 * beta * beta * Pdiag - penalty * s
            if w.sum() == 1:
                c[w > 0] = -np.inf
            i = int(np.argmax(c))
            if c[i] <= 1e-12 * (1.0 + abs(beta * a)):
                break
            w[i] += s[i]
            Pw += s[i] * P[:, i]
            a += s[i] * h[i]
            b = float(w @ Pw)
            flipped = True
        # exact single-flip moves with the shift re-optimized
        while True:
            s = np.where(w > 0, -1.0, 1.0)
            a2 = a + s * h
            b2 = b + 2.0 * s * Pw + Pdiag
            sizes = w.sum() + s
            ok = sizes >= 1
            f2 = np.full(h.size, -np.inf)
            base = a2[ok] ** 2 / (2.0 * b2[ok])
            if not two_sided:
                base = np.where(a2[ok] < 0, 0.0, base)
            f2[ok] = base - penalty * sizes[ok]
            i = int(np.argmax(f2))
            cur = score(a, b)
            tol = cur + 1e-12 * (1.0 + abs(cur))
            if f2[i] > tol:
                w[i] += s[i]
                Pw += s[i] * P[:, i]
                a += s[i] * h[i]
                b = float(w @ Pw)
                flipped = True
                continue
            # swap one member out for one non-member
            inn, out = np.flatnonzero(w > 0), np.flatnonzero(w == 0)
            if inn.size == 0 or out.size == 0:
                break
            a3 = a - h[inn][:, None] + h[out][None, :]
            b3 = (
                b
                - 2.0 * Pw[inn][:, None] + Pdiag[inn][:, None]
                + 2.0 * Pw[out][None, :] + Pdiag[out][None, :]
                - 2.0 * P[np.ix_(inn, out)]
            )
            f3 = a3 * a3 / (2.0 * b3)
            if not two_sided:
                f3 = np.where(a3 < 0, 0.0, f3)
            f3 = f3 - penalty * w.sum()
            p, q = np.unravel_index(int(np.argmax(f3)), f3.shape)
            if f3[p, q] <= tol:
                break
            i, j = inn[p], out[q]
            w[i], w[j] = 0.0, 1.0
            Pw += P[:, j] - P[:, i]
            a += h[j] - h[i]
            b = float(w @ Pw)
            flipped = True
        if not flipped:
            break
        trace.append(score(a, b))
    return w.astype(bool), trace[-1], trace


def _iterative_best(P, h, restarts, rng, two_sided, penalty):
    k = h.size
    single = h / np.diag(P)
    if two_sided:
        j = int(np.argmax(np.abs(h) / np.sqrt(np.diag(P))))
        fallback = float(single[j])
    else:
        fallback = float(max(single.max(), 0.0))
    best_w, best_s, traces = None, -np.inf, []
    # half the restarts grow from the strongest singletons, the rest from
    # random masks of varied density
    z = np.abs(h) / np.sqrt(np.diag(P)) if two_sided else h / np.sqrt(np.diag(P))
    seeds = np.argsort(-z, kind="stable")[: restarts // 2]
    for t in range(restarts):
        if t < seeds.size:
            w0 = np.zeros(k, dtype=bool)
            w0[seeds[t]] = True
        else:
            p = rng.uniform(0.0, 1.0)
            w0 = rng.random(k) < p
            while not w0.any():
                w0 = rng.random(k) < p
        w, s, tr = _coordinate_ascent(P, h, w0.astype(float), two_sided, penalty, fallback)
        traces.append(tr)
        if s > best_s + 1e-12 * (1 + abs(s)):
            best_w, best_s = w, s
    return best_w, best_s, traces


def scan_neighborhood_iterative(
    post: PosteriorMoments,
    y_S,
    restarts: int = 20,
    two_sided: bool = True,
    penalty: float = 0.0,
    seed=0,
    return_traces: bool = False,
):
    """Approximate best subset by coordinate ascent with random restarts.

    Each restart alternates between setting the shift to its maximum
    likelihood value for the current mask and greedily flipping the bit
    with the largest positive pointwise contribution at that shift.
    """
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    r, P, h = _precision_system(post, y_S)
    rng = np.random.default_rng(seed)
    mask, _, traces = _iterative_best(P, h, restarts, rng, two_sided, penalty)
    score = gaussian_meanshift_score(GaussianResidualSystem(r, post.Sigma, mask), two_sided, penalty)
    if return_traces:
        return mask, score, traces
    return mask, score


class GpssScanner:
    """Scans every neighborhood under one fixed GP model.

    The scanner is reusable across response vectors sharing the same
    covariates and missing-data mask, which is what randomization testing
    needs.
    """

    def __init__(self, model: GPModel, data: PointDataset, config: GpssConfig = GpssConfig()):
        self.model = model
        self.data = data
        self.config = config
        k = min(config.k, data.observed_index.size)
        self.k = k
        self.neighborhoods = build_neighborhoods(data, k, config.metric)
        self.precision = ObservedPrecision(model, data)
        self._members = np.array([nb.members for nb in self.neighborhoods], dtype=int)
        pos = self.precision.positions(self._members.ravel()).reshape(self._members.shape)
        self._pos = pos
        Q = self.precision.Q
        self._P = Q[pos[:, :, None], pos[:, None, :]]
        self._exhaustive = k <= config.k_exhaustive

    def _batched_exhaustive(self, H):
        k = self.k
        M = _all_masks(k)
        pairs = _mask_pairs(k)
        sizes = M.sum(axis=1)
        N = H.shape[0]
        step = max(1, _BATCH_ENTRIES // M.shape[0])
        codes = np.empty(N, dtype=int)
        best = np.empty(N)
        Pflat = self._P.reshape(N, k * k)
        for lo in range(0, N, step):
            hi = min(N, lo + step)
            a = M @ H[lo:hi].T
            b = pairs @ Pflat[lo:hi].T
            s = _score_from_ab(a, b, self.config.two_sided) - self.config.penalty * sizes[:, None]
            j = np.argmax(s, axis=0)
            codes[lo:hi] = j
            best[lo:hi] = s[j, np.arange(hi - lo)]
        return M[codes].astype(bool), best

    def _search(self, y_full):
        H = self.precision.whitened_residual(y_full)[self._pos]
        if self._exhaustive:
            return self._batched_exhaustive(H)
        masks = np.zeros(H.shape, dtype=bool)
        best = np.empty(H.shape[0])
        for n, nb in enumerate(self.neighborhoods):
            rng = np.random.default_rng([self.config.seed, nb.center])
            masks[n], best[n], _ = _iterative_best(
                self._P[n], H[n], self.config.restarts, rng, self.config.two_sided, self.config.penalty
            )
        return masks, best

    def max_score(self, y_full) -> float:
        """Largest neighborhood score for ``y_full`` (replica fast path)."""
        _, best = self._search(y_full)
        return float(best.max())

    def scan(self, y_full=None):
        """Ranked, deduplicated results for ``y_full`` (defaults to the data's responses)."""
        y_full = self.data.y if y_full is None else np.asarray(y_full, dtype=float)
        masks, _ = self._search(y_full)
        found = {}
        for n, nb in enumerate(self.neighborhoods):
            try:
                post = self.precision.moments(nb.members, y_full)
                r = y_full[list(nb.members)] - post.mu
                sv = gaussian_meanshift_score(
                    GaussianResidualSystem(r, post.Sigma, masks[n]), self.config.two_sided, self.config.penalty
                )
            except DecompositionError as exc:
                raise ScanError(f"neighborhood centered at {nb.center}: {exc}", where=nb.center) from exc
            subset = tuple(sorted(self._members[n][masks[n]].tolist()))
            prev = found.get(subset)
            if prev is None or sv.score > prev.score:
                found[subset] = GpssScanResult(subset, sv.score, sv.effect, nb.center)
        return sorted(found.values(), key=lambda res: (-res.score, res.neighborhood_center, res.subset))


def transform_responses(y, transform):
    if transform == "none":
        return np.asarray(y, dtype=float)
    if transform == "sqrt":
        y = np.asarray(y, dtype=float)
        out = np.full_like(y, np.nan)
        ok = np.isfinite(y)
        if np.any(y[ok] < 0):
            raise ConfigError("sqrt transform needs nonnegative responses")
        out[ok] = np.sqrt(y[ok])
        return out
    raise ConfigError(f"unknown transform {transform!r}; choose 'none' or 'sqrt'")


def gpss_scan(data: PointDataset, k: int | None = None, config: GpssConfig = GpssConfig()):
    """Fit the GP once on all data, scan all neighborhoods, rank the subsets.

    Returns
    -------
    results : list of GpssScanResult
        Sorted by score, descending; p-values are left unset.
    scanner : GpssScanner
        Holds the fitted model and can rescan replica responses.
    """
    if k is not None:
        config = replace(config, k=k)
    if config.transform != "none":
        data = data.with_responses(transform_responses(data.y, config.transform))
    model = fit_hyperparameters(data, config.fit)
    scanner = GpssScanner(model, data, config)
    return scanner.scan(), scanner
