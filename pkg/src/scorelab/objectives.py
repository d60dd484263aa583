"""Training objectives and the integration-by-parts identities behind them.

The implicit objective ell(s, y) = ||s(y)||^2 / 2 + div s(y) differs from the
squared score error by a model-independent constant, and the denoising
objective ||s(X_t) + Z/sigma_t||^2 does the same at any fixed diffusion time.
Both identities are verified here by common-random-number Monte Carlo: the
same draws feed all terms, so the gap estimator has zero variance when the
model equals the ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .generators import DataBatch, DomainError, ou_coeffs, sample_noisy, sample_ou_pair
from .oracle import (OracleContext, true_score, true_score_divergence,
                     true_score_jacobian)


@dataclass(frozen=True)
class LossReport:
    value: float
    per_sample: np.ndarray
    se: float

    def __post_init__(self):
        self.per_sample.flags.writeable = False


def _report(per_sample: np.ndarray) -> LossReport:
    n = len(per_sample)
    se = float(per_sample.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return LossReport(value=float(per_sample.mean()), per_sample=per_sample, se=se)


def _score_and_div(model, y):
    if hasattr(model, "score_with_divergence"):
        return model.score_with_divergence(y)
    return model.score(y), model.score_divergence(y)


def ism_loss(model, y) -> np.ndarray:
    """Per-sample implicit loss ||s(y)||^2 / 2 + div s(y)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s, div = _score_and_div(model, y)
    return 0.5 * np.sum(s * s, axis=1) + div


def dsm_loss_sample(model, x0, z, t: float) -> np.ndarray:
    """Per-sample denoising loss ||s(x_t) + z / sigma_t||^2, one noise draw."""
    if t <= 0:
        raise DomainError("denoising loss requires t > 0")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    m_t, sig_sq = ou_coeffs(t)
    sigma_t = math.sqrt(sig_sq)
    x_t = m_t * x0 + sigma_t * z
    r = model.score(x_t) + z / sigma_t
    return np.sum(r * r, axis=1)


def empirical_risk(model, batch: DataBatch, method: str) -> LossReport:
    """Mean per-sample loss over a batch whose provenance matches the method."""
    if method == "ism":
        if batch.provenance != "noisy":
            raise DomainError("implicit risk needs a noisy marginal batch")
        return _report(ism_loss(model, batch.rows))
    if method == "dsm":
        if batch.provenance != "ou_pair":
            raise DomainError("denoising risk needs an OU pair batch")
        t = getattr(model, "t", None) or batch.t
        if batch.t != t:
            raise DomainError(f"batch time {batch.t} != model time {t}")
        return _report(dsm_loss_sample(model, batch.x0, batch.z, batch.t))
    raise DomainError(f"unknown method {method!r}")


class DivergenceShift:
    """Sensitivity-control wrapper: same score, divergence shifted by a constant."""

    def __init__(self, model, offset: float):
        self.model = model
        self.offset = offset

    def score(self, y):
        return self.model.score(y)

    def score_divergence(self, y):
        return self.model.score_divergence(y) + self.offset

    def score_with_divergence(self, y):
        s, div = _score_and_div(self.model, y)
        return s, div + self.offset


def ism_identity_check(model, ctx: OracleContext, n_mc: int, seed: int) -> dict:
    """Monte Carlo audit of E ell(s) - E ell(s*) - E||s - s*||^2 / 2 = 0.

    All three expectations share the same draws; ``holds`` allows 4 standard
    errors.  Plugging the oracle in as the model gives gap exactly zero.
    """
    if ctx.t is not None:
        raise DomainError("implicit identity is checked at time zero")
    y = sample_noisy(ctx.spec, ctx.noise, n_mc, seed).rows
    s_model, div_model = _score_and_div(model, y)
    s_true = true_score(ctx, y)
    div_true = true_score_divergence(ctx, y)
    loss_model = 0.5 * np.sum(s_model * s_model, axis=1) + div_model
    loss_true = 0.5 * np.sum(s_true * s_true, axis=1) + div_true
    delta = loss_model - loss_true - 0.5 * np.sum((s_model - s_true) ** 2, axis=1)
    gap = float(delta.mean())
    se = float(delta.std(ddof=1) / math.sqrt(n_mc))
    return {"gap": gap, "se": se, "holds": bool(abs(gap) <= 4.0 * se)}


def dsm_identity_check(model, ctx: OracleContext, n_mc: int, seed: int,
                       target_scale: float = 1.0) -> dict:
    """Monte Carlo audit of E ell_t(s) - E ell_t(s_t*) - E||s - s_t*||^2 = 0.

    ``target_scale`` rescales sigma_t inside the conditional-score target and
    exists as a sensitivity control; 1.0 is the faithful check.
    """
    if ctx.t is None:
        raise DomainError("denoising identity needs a time-t oracle context")
    t = ctx.t
    batch = sample_ou_pair(ctx.spec, ctx.noise, t, n_mc, seed)
    _, sig_sq = ou_coeffs(t)
    sigma_t = math.sqrt(sig_sq) * target_scale
    x_t, z = batch.rows, batch.z
    s_model = model.score(x_t)
    s_true = true_score(ctx, x_t)
    r_model = s_model + z / sigma_t
    r_true = s_true + z / sigma_t
    delta = (np.sum(r_model * r_model, axis=1)
             - np.sum(r_true * r_true, axis=1)
             - np.sum((s_model - s_true) ** 2, axis=1))
    gap = float(delta.mean())
    se = float(delta.std(ddof=1) / math.sqrt(n_mc))
    return {"gap": gap, "se": se, "holds": bool(abs(gap) <= 4.0 * se)}
