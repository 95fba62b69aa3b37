"""Closed-form log-likelihood-ratio scores.

Two alternatives are supported:

* expectation-based Poisson: counts inside S are ``Poisson(q * mu)`` with
  ``q >= 1`` against ``Poisson(mu)``; only the aggregates ``C = sum(y)`` and
  ``B = sum(mu)`` over S matter.
* Gaussian mean shift: ``y ~ N(mu + beta * w, Sigma)`` against
  ``N(mu, Sigma)``; with ``a = w' Sigma^-1 r`` and ``b = w' Sigma^-1 w`` the
  maximizing shift is ``a / b`` and the score ``a**2 / (2 b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .exceptions import DecompositionError, InvalidAggregateError, InvalidSubsetError

#: Smallest admissible baseline total; below this the Poisson score diverges.
MIN_BASELINE = 1e-12


@dataclass(frozen=True)
class PoissonAggregate:
    C: float
    B: float

    def __post_init__(self):
        if not (math.isfinite(self.C) and math.isfinite(self.B)):
            raise InvalidAggregateError(f"non-finite aggregate C={self.C}, B={self.B}")
        if self.C < 0:
            raise InvalidAggregateError(f"negative count total C={self.C}")
        if self.B < MIN_BASELINE:
            raise InvalidAggregateError(f"baseline total B={self.B} below {MIN_BASELINE}")


@dataclass(frozen=True)
class ScoreValue:
    score: float
    effect: float


@dataclass(frozen=True)
class GaussianResidualSystem:
    """Residuals ``r = y - mu``, covariance ``Sigma`` and subset indicator ``w``."""

    r: np.ndarray
    Sigma: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).ravel()
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        w = np.asarray(self.w).ravel().astype(bool)
        if S.shape != (r.size, r.size) or w.size != r.size:
            raise InvalidSubsetError(
                f"shape mismatch: r {r.shape}, Sigma {S.shape}, w {w.shape}"
            )
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "w", w)


def ebp_score(agg: PoissonAggregate) -> ScoreValue:
    """Expectation-based Poisson score maximized over ``q >= 1``.

    ``F = C log(C/B) + B - C`` when ``C > B``, else 0; the effect is
    ``q_hat = max(1, C/B)``.
    """
    C, B = float(agg.C), float(agg.B)
    if C > B:
        return ScoreValue(C * math.log(C / B) + B - C, C / B)
    return ScoreValue(0.0, 1.0)


def ebp_score_array(C, B):
    """Vectorized :func:`ebp_score` without validation (internal hot path)."""
    C = np.asarray(C, dtype=float)
    B = np.asarray(B, dtype=float)
    if C.shape == B.shape:
        hi = C > B
        out = np.zeros(C.shape)
        Ch, Bh = C[hi], B[hi]
        out[hi] = Ch * np.log(Ch / Bh) + Bh - Ch
        return out
    out = np.zeros(np.broadcast(C, B).shape)
    hi = C > B
    Ch = np.broadcast_to(C, out.shape)[hi]
    Bh = np.broadcast_to(B, out.shape)[hi]
    out[hi] = Ch * np.log(Ch / Bh) + Bh - Ch
    return out


def _cholesky(Sigma):
    try:
        return cholesky(Sigma, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise DecompositionError(f"covariance is not positive definite: {exc}") from exc


def gaussian_meanshift_score(
    sys: GaussianResidualSystem, two_sided: bool = True, penalty: float = 0.0
) -> ScoreValue:
    """Gaussian mean-shift score maximized over the shift ``beta``.

    Parameters
    ----------
    sys : GaussianResidualSystem
    two_sided : bool, default True
        If False the shift is constrained to ``beta >= 0``.
    penalty : float, default 0.0
        Optional per-point cost subtracted from the score, ``penalty * |S|``.

    Returns
    -------
    ScoreValue
        ``score`` is ``a**2 / (2 b)`` (minus the penalty), ``effect`` is ``a / b``.
    """
    if not sys.w.any():
        raise InvalidSubsetError("cannot score an empty subset")
    L = _cholesky(sys.Sigma)
    zr = solve_triangular(L, sys.r, lower=True)
    zw = solve_triangular(L, sys.w.astype(float), lower=True)
    a = float(zw @ zr)
    b = float(zw @ zw)
    if not two_sided and a < 0:
        return ScoreValue(float(-penalty * sys.w.sum()), 0.0)
    return ScoreValue(float(a * a / (2.0 * b) - penalty * sys.w.sum()), a / b)


def fixed_shift_llr(sys: GaussianResidualSystem, beta: float) -> float:
    """Gaussian log-likelihood ratio at a fixed shift ``beta``."""
    L = _cholesky(sys.Sigma)
    zr = solve_triangular(L, sys.r, lower=True)
    zw = solve_triangular(L, sys.w.astype(float), lower=True)
    return float(beta * (zw @ zr) - 0.5 * beta * beta * (zw @ zw))


def pointwise_contributions(sys: GaussianResidualSystem, beta: float) -> np.ndarray:
    """Change in the fixed-``beta`` LLR from flipping each ``w_i`` alone.

    With ``P = Sigma^-1`` and ``s_i = +1`` when point i is currently
    excluded (``-1`` otherwise) the change is
    ``s_i * beta * ((P r)_i - beta (P w)_i) - beta**2 P_ii / 2``.
    """
    if not math.isfinite(beta):
        raise ValueError(f"beta must be finite, got {beta}")
    L = _cholesky(sys.Sigma)
    w = sys.w.astype(float)
    Pr = cho_solve((L, True), sys.r)
    Pw = cho_solve((L, True), w)
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    Pdiag = np.einsum("ij,ij->j", Linv, Linv)
    s = np.where(sys.w, -1.0, 1.0)
    return s * beta * (Pr - beta * Pw) - 0.5 * beta * beta * Pdiag
