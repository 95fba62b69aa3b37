"""Gaussian-process null model: SE-ARD kernel, marginal likelihood, conditioning."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from .exceptions import ConditioningError, ConfigError, OptimizationError

logger = logging.getLogger(__name__)

KERNELS = ("se_ard",)

_JITTER_START = 1e-8
_JITTER_MAX = 1e-2


@dataclass(frozen=True)
class PointDataset:
    """Covariates ``X`` (n x D), responses ``y`` and an ``observed`` mask.

    Missing responses may hold any value (NaN is typical); they are never
    read.
    """

    X: np.ndarray
    y: np.ndarray
    observed: np.ndarray = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if self.observed is None:
            obs = np.isfinite(y)
        else:
            obs = np.asarray(self.observed, dtype=bool).ravel()
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ConfigError(f"X must be a non-empty n x D matrix, got shape {X.shape}")
        if y.size != X.shape[0] or obs.size != X.shape[0]:
            raise ConfigError("X, y and observed must agree in length")
        if not np.all(np.isfinite(X)):
            raise ConfigError("X must be finite everywhere")
        if not np.all(np.isfinite(y[obs])):
            raise ConfigError("y must be finite wherever observed")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "observed", obs)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def observed_index(self):
        return np.flatnonzero(self.observed)

    def with_responses(self, y):
        """Copy with ``y`` replaced, mask and metadata kept."""
        return replace(self, y=np.asarray(y, dtype=float))


@dataclass(frozen=True)
class GPModel:
    mean_const: float
    signal_var: float
    lengthscales: tuple
    noise_var: float
    kernel: str = "se_ard"

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        vals = (self.signal_var, self.noise_var) + ls
        if not all(math.isfinite(v) and v > 0 for v in vals):
            raise ConfigError(f"variances and lengthscales must be positive and finite: {vals}")
        if not math.isfinite(self.mean_const):
            raise ConfigError("mean_const must be finite")
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}; choose from {KERNELS}")

    @property
    def theta(self):
        """Parameter vector (log signal_var, log lengthscales..., log noise_var, mean_const)."""
        return np.r_[
            math.log(self.signal_var),
            np.log(self.lengthscales),
            math.log(self.noise_var),
            self.mean_const,
        ]

    @classmethod
    def from_theta(cls, theta, kernel="se_ard"):
        theta = np.asarray(theta, dtype=float)
        return cls(
            mean_const=float(theta[-1]),
            signal_var=float(np.exp(theta[0])),
            lengthscales=tuple(np.exp(theta[1:-2])),
            noise_var=float(np.exp(theta[-2])),
            kernel=kernel,
        )


def kernel_eval(model: GPModel, x, x2) -> float:
    """SE-ARD covariance ``signal_var * exp(-0.5 * sum(((x - x2) / l)**2))``."""
    d = (np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)) / np.asarray(model.lengthscales)
    return float(model.signal_var * np.exp(-0.5 * np.sum(d * d)))


def kernel_matrix(model: GPModel, X, X2=None):
    X = np.asarray(X, dtype=float) / np.asarray(model.lengthscales)
    X2 = X if X2 is None else np.asarray(X2, dtype=float) / np.asarray(model.lengthscales)
    sq = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(X2 * X2, axis=1)[None, :]
        - 2.0 * X @ X2.T
    )
    np.maximum(sq, 0.0, out=sq)
    return model.signal_var * np.exp(-0.5 * sq)


def safe_cholesky(A, scale):
    """Cholesky factor of ``A``, adding escalating diagonal jitter only if needed.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute amount added.
    """
    n = A.shape[0]
    try:
        return cholesky(A, lower=True), 0.0
    except LinAlgError:
        pass
    jitter = _JITTER_START
    while jitter <= _JITTER_MAX * (1 + 1e-9):
        try:
            L = cholesky(A + jitter * scale * np.eye(n), lower=True)
            return L, jitter * scale
        except LinAlgError:
            jitter *= 10.0
    raise ConditioningError(
        f"Gram matrix of size {n} not positive definite after jitter {_JITTER_MAX}"
    )


def _total_cov(model, X):
    return kernel_matrix(model, X) + model.noise_var * np.eye(X.shape[0])


def log_marginal_likelihood(model: GPModel, data: PointDataset):
    """Log evidence of the observed responses and its gradient.

    The gradient is taken with respect to ``model.theta``, i.e.
    (log signal_var, log lengthscales, log noise_var, mean_const).
    """
    idx = data.observed_index
    if idx.size == 0:
        raise ConfigError("log marginal likelihood needs at least one observed point")
    X, y = data.X[idx], data.y[idx]
    n = idx.size
    Kf = kernel_matrix(model, X)
    C = Kf + model.noise_var * np.eye(n)
    L, _ = safe_cholesky(C, model.signal_var)
    r = y - model.mean_const
    alpha = cho_solve((L, True), r)
    lml = -0.5 * r @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * math.log(2 * math.pi)

    # 0.5 * tr((alpha alpha' - C^-1) dC) for each log-parameter
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    grad = np.empty(X.shape[1] + 3)
    grad[0] = 0.5 * np.sum(W * Kf)
    ls = np.asarray(model.lengthscales)
    for d in range(X.shape[1]):
        diff = (X[:, d][:, None] - X[:, d][None, :]) / ls[d]
        grad[1 + d] = 0.5 * np.sum(W * Kf * diff * diff)
    grad[-2] = 0.5 * model.noise_var * np.trace(W)
    grad[-1] = alpha.sum()
    return float(lml), grad


@dataclass(frozen=True)
class FitConfig:
    n_starts: int = 5
    max_iter: int = 200
    seed: int = 0
    kernel: str = "se_ard"


def _heuristic_theta(X, y):
    D = X.shape[1]
    var = float(np.var(y)) if y.size > 1 else 0.0
    scale = var if var > 0 else 1.0
    ls = np.ones(D)
    if X.shape[0] > 1:
        for d in range(D):
            dist = pdist(X[:, [d]])
            dist = dist[dist > 0]
            if dist.size:
                ls[d] = np.median(dist)
    return np.r_[math.log(scale), np.log(ls), math.log(0.1 * scale), float(np.mean(y))], scale


def _bounds(X, y, scale):
    D = X.shape[1]
    span = np.ptp(X, axis=0) if X.shape[0] > 1 else np.ones(D)
    span = np.where(span > 0, span, 1.0)
    b = [(math.log(1e-6 * scale), math.log(1e3 * scale))]
    for d in range(D):
        b.append((math.log(1e-3 * span[d]), math.log(1e3 * span[d])))
    b.append((math.log(1e-6 * scale), math.log(1e3 * scale)))
    b.append((None, None))
    return b


def fit_hyperparameters(data: PointDataset, config: FitConfig | None = None) -> GPModel:
    """Maximize the log marginal likelihood from several starting points.

    The first start is the data-driven heuristic (lengthscale = median
    pairwise distance per dimension, signal variance = response variance);
    the rest are drawn log-uniformly within a factor ``e`` of it.
    """
    config = config or FitConfig()
    idx = data.observed_index
    X, y = data.X[idx], data.y[idx]
    theta0, scale = _heuristic_theta(X, y)
    if idx.size < data.dim + 3:
        warnings.warn(
            f"only {idx.size} observed points for {data.dim}-D covariates; using default hyperparameters",
            stacklevel=2,
        )
        return GPModel.from_theta(theta0, kernel=config.kernel)

    bounds = _bounds(X, y, scale)
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    rng = np.random.default_rng(config.seed)

    def objective(theta):
        try:
            val, g = log_marginal_likelihood(GPModel.from_theta(theta, config.kernel), data)
        except ConditioningError:
            return 1e300, np.zeros_like(theta)
        return -val, -g

    best_theta, best_val = None, -np.inf
    n_ok = 0
    for s in range(config.n_starts):
        start = theta0.copy()
        if s > 0:
            start[:-1] += rng.uniform(-1.0, 1.0, size=start.size - 1)
        start = np.clip(start, lo, hi)
        f0, _ = objective(start)
        init_val = -f0
        try:
            res = minimize(
                objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": config.max_iter},
            )
        except (ValueError, FloatingPointError) as exc:
            logger.debug("start %d failed: %s", s, exc)
            res = None
        cand_theta, cand_val = start, init_val
        if res is not None and np.all(np.isfinite(res.x)) and -res.fun >= init_val:
            cand_theta, cand_val = res.x, -res.fun
            n_ok += 1
        if cand_val > best_val:
            best_theta, best_val = cand_theta, cand_val
    model = GPModel.from_theta(best_theta, kernel=config.kernel) if best_theta is not None else None
    if n_ok == 0:
        raise OptimizationError("no optimizer start improved on its initial point", best_model=model)
    return model


@dataclass(frozen=True)
class PosteriorMoments:
    mu: np.ndarray
    Sigma: np.ndarray
    indices: np.ndarray


def posterior_conditional(model: GPModel, data: PointDataset, S) -> PosteriorMoments:
    """Predictive moments of ``f + eps`` at ``X[S]`` given the observed points outside S."""
    S = np.unique(np.asarray(S, dtype=int).ravel())
    if S.size == 0:
        raise ConfigError("subset S must be nonempty")
    if S.min() < 0 or S.max() >= data.n:
        raise ConfigError("subset indices out of range")
    cond = np.setdiff1d(data.observed_index, S, assume_unique=True)
    XS = data.X[S]
    prior = _total_cov(model, XS)
    mu = np.full(S.size, model.mean_const)
    if cond.size:
        Xc = data.X[cond]
        L, _ = safe_cholesky(_total_cov(model, Xc), model.signal_var)
        KsC = kernel_matrix(model, XS, Xc)
        mu = mu + KsC @ cho_solve((L, True), data.y[cond] - model.mean_const)
        V = cho_solve((L, True), KsC.T)
        Sigma = prior - KsC @ V
    else:
        Sigma = prior
    Sigma = 0.5 * (Sigma + Sigma.T)
    # jitter until the conditional covariance factorizes
    _, jit = safe_cholesky(Sigma, model.signal_var)
    Sigma = Sigma + jit * np.eye(S.size)
    return PosteriorMoments(mu=mu, Sigma=Sigma, indices=S)


class ObservedPrecision:
    """Precision of the joint predictive covariance over all observed points.

    Conditioning a block S on the rest has the closed form
    ``Sigma_S = inv(Q_SS)`` and ``Sigma_S^-1 (y_S - mu_S) = (Q (y - m))_S``,
    so one factorization serves every neighborhood and every replica.
    """

    def __init__(self, model: GPModel, data: PointDataset):
        self.model = model
        self.index = data.observed_index
        C = _total_cov(model, data.X[self.index])
        L, jit = safe_cholesky(C, model.signal_var)
        self.chol = L
        self.Q = cho_solve((L, True), np.eye(self.index.size))
        self.Q = 0.5 * (self.Q + self.Q.T)
        self._pos = np.full(data.n, -1)
        self._pos[self.index] = np.arange(self.index.size)

    def positions(self, idx):
        pos = self._pos[np.asarray(idx, dtype=int)]
        if np.any(pos < 0):
            raise ConfigError("conditioning subset contains unobserved points")
        return pos

    def whitened_residual(self, y_full):
        """``Q (y_obs - m)`` for a full-length response vector."""
        return self.Q @ (np.asarray(y_full, dtype=float)[self.index] - self.model.mean_const)

    def block(self, idx):
        pos = self.positions(idx)
        return self.Q[np.ix_(pos, pos)]

    def moments(self, idx, y_full):
        """Same moments as :func:`posterior_conditional` computed from the precision."""
        pos = self.positions(idx)
        P = self.Q[np.ix_(pos, pos)]
        h = self.whitened_residual(y_full)[pos]
        Sigma = np.linalg.inv(P)
        Sigma = 0.5 * (Sigma + Sigma.T)
        r = Sigma @ h
        y_S = np.asarray(y_full, dtype=float)[np.asarray(idx, dtype=int)]
        return PosteriorMoments(mu=y_S - r, Sigma=Sigma, indices=np.asarray(idx, dtype=int))


def sample_responses(model: GPModel, data: PointDataset, rng, chol=None):
    """Draw ``y ~ N(m, K + noise I)`` at the observed points; missing entries stay NaN."""
    idx = data.observed_index
    if chol is None:
        chol, _ = safe_cholesky(_total_cov(model, data.X[idx]), model.signal_var)
    y = np.full(data.n, np.nan)
    y[idx] = model.mean_const + chol @ rng.standard_normal(idx.size)
    return y
