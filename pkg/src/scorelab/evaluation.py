"""Monte Carlo error functionals against the oracle and rate fitting.

The headline quantities are the squared score error and the squared Frobenius
error of the score Jacobian, both averaged over the relevant marginal, plus
an ordinary-least-squares slope fit of log error against log sample size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from .generators import DomainError
from .oracle import OracleContext, sample_marginal, true_score, true_score_jacobian


@dataclass(frozen=True)
class ErrorEstimate:
    mean: float
    se: float
    n_mc: int
    seed: int


def _estimate(values: np.ndarray, n_mc: int, seed: int) -> ErrorEstimate:
    se = float(values.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    return ErrorEstimate(mean=float(values.mean()), se=se, n_mc=n_mc, seed=seed)


def score_error(model, ctx: OracleContext, n_mc: int, seed: int) -> ErrorEstimate:
    """Mean squared score error over fresh draws from the context's marginal."""
    y = sample_marginal(ctx, n_mc, seed)
    diff = model.score(y) - true_score(ctx, y)
    return _estimate(np.sum(diff * diff, axis=1), n_mc, seed)


def jacobian_error(model, ctx: OracleContext, n_mc: int, seed: int) -> ErrorEstimate:
    """Mean squared Frobenius error of the score Jacobian, same contract."""
    y = sample_marginal(ctx, n_mc, seed)
    diff = model.score_jacobian(y) - true_score_jacobian(ctx, y)
    return _estimate(np.sum(diff * diff, axis=(1, 2)), n_mc, seed)


@dataclass(frozen=True)
class RateFit:
    points: tuple               # ((n, error), ...)
    slope: float
    intercept: float
    r2: float
    target_slope: Optional[float] = None


def fit_rate(points: Sequence, beta: Optional[float] = None,
             d: Optional[int] = None) -> RateFit:
    """OLS of log(error) on log(n); target slope -2 beta / (2 beta + d)."""
    points = [(float(n), float(e)) for n, e in points]
    if len(points) < 3:
        raise DomainError("need at least 3 points to fit a rate")
    if any(e <= 0 for _, e in points):
        raise DomainError("errors must be positive for a log-log fit")
    x = np.log([n for n, _ in points])
    y = np.log([e for _, e in points])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if sst == 0.0 else 1.0 - float(np.sum(resid ** 2)) / sst
    target = None
    if beta is not None and d is not None and d > 0:
        target = -2.0 * beta / (2.0 * beta + d)
    return RateFit(points=tuple(points), slope=float(slope),
                   intercept=float(intercept), r2=r2, target_slope=target)


def association_check(records: Sequence, threshold: float = 0.7) -> dict:
    """Spearman rank correlation between score and Jacobian errors across runs.

    Accepts (score_error, jacobian_error) pairs or objects carrying those
    attributes.  A strong positive association is the desk-scale shadow of
    the Jacobian error being dominated by a power of the score error.
    """
    pairs = []
    for r in records:
        if hasattr(r, "score_error"):
            pairs.append((float(r.score_error), float(r.jacobian_error)))
        else:
            a, b = r
            pairs.append((float(a), float(b)))
    if len(pairs) < 10:
        raise DomainError("need at least 10 records for the association check")
    arr = np.asarray(pairs)
    rho = float(spearmanr(arr[:, 0], arr[:, 1]).statistic)
    return {"spearman": rho, "holds": bool(rho >= threshold)}
