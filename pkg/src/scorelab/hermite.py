"""Multivariate probabilist's Hermite series with exact coefficient calculus.

Under the standard Gaussian weight the basis polynomials are orthogonal with
<H_k, H_j> = k! 1[k=j], and differentiation acts diagonally on coefficients,
so squared L2 norms, Sobolev seminorms, divergences and Jacobian Frobenius
norms of a finite series are all exact finite sums.  That makes the
interpolation inequalities relating ||div f|| and ||grad f||_F to ||f|| and
the order-alpha seminorm checkable without any quadrature error; the weighted
(non-Gaussian) variants are checked by Monte Carlo with exact integrands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .generators import DomainError, sample_noisy
from .oracle import OracleContext

# 21! overflows 64-bit integers; keep factorial ratios exactly representable
MAX_DEGREE = 20


def hermite_eval(k: int, x) -> np.ndarray:
    """H_k(x) by the three-term recurrence H_{k+1} = x H_k - k H_{k-1}."""
    if k < 0:
        raise DomainError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if k == 0:
        return h_prev
    h = x.copy()
    for j in range(1, k):
        h, h_prev = x * h - j * h_prev, h
    return h


def hermite_table(x: np.ndarray, max_deg: int) -> np.ndarray:
    """Table H_j(x) for j = 0..max_deg; shape x.shape + (max_deg+1,)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (max_deg + 1,))
    out[..., 0] = 1.0
    if max_deg >= 1:
        out[..., 1] = x
    for j in range(1, max_deg):
        out[..., j + 1] = x * out[..., j] - j * out[..., j - 1]
    return out


def _multi_factorial(k: Iterable[int]) -> int:
    out = 1
    for ki in k:
        out *= math.factorial(ki)
    return out


def _falling_ratio(k, p) -> int:
    """k!/(k-p)! componentwise, exact integers."""
    out = 1
    for ki, pi in zip(k, p):
        out *= math.perm(ki, pi)
    return out


def multi_indices(dim: int, max_total: int, exact: bool = False) -> list[tuple]:
    """All multi-indices in Z_+^dim with |k| <= max_total (== if exact)."""
    out = []

    def rec(prefix, remaining):
        if len(prefix) == dim:
            if not exact or remaining == 0:
                out.append(tuple(prefix))
            return
        for v in range(remaining + 1):
            rec(prefix + [v], remaining - v)

    rec([], max_total)
    return out


@dataclass(frozen=True)
class HermiteSeries:
    """Finite expansion sum_k a_k prod_i H_{k_i}(x_i) with vector coefficients."""

    dim: int
    out_dim: int
    terms: dict  # multi-index tuple -> ndarray (out_dim,)

    def __post_init__(self):
        clean = {}
        for k, a in self.terms.items():
            k = tuple(int(v) for v in k)
            if len(k) != self.dim or any(v < 0 for v in k):
                raise DomainError(f"bad multi-index {k} for dim {self.dim}")
            if max(k, default=0) > MAX_DEGREE:
                raise DomainError(f"degree {max(k)} exceeds MAX_DEGREE={MAX_DEGREE}")
            a = np.asarray(a, dtype=float).reshape(self.out_dim).copy()
            a.flags.writeable = False
            clean[k] = a
        object.__setattr__(self, "terms", clean)

    @property
    def max_degree(self) -> int:
        return max((max(k, default=0) for k in self.terms), default=0)

    def __call__(self, x: np.ndarray, table: Optional[np.ndarray] = None) -> np.ndarray:
        """Evaluate at points of shape (n, dim); returns (n, out_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise DomainError(f"points must have {self.dim} columns")
        if table is None:
            table = hermite_table(x, self.max_degree)
        out = np.zeros((x.shape[0], self.out_dim))
        for k, a in self.terms.items():
            basis = np.ones(x.shape[0])
            for axis, deg in enumerate(k):
                if deg:
                    basis = basis * table[:, axis, deg]
            out += basis[:, None] * a
        return out

    def component(self, i: int) -> "HermiteSeries":
        return HermiteSeries(self.dim, 1,
                             {k: a[i:i + 1] for k, a in self.terms.items()})


def series_l2_norm_sq(s: HermiteSeries) -> float:
    """Exact squared L2(standard Gaussian) norm: sum_k ||a_k||^2 k!."""
    return float(sum(float(a @ a) * _multi_factorial(k)
                     for k, a in s.terms.items()))


def series_derivative(s: HermiteSeries, p) -> HermiteSeries:
    """Partial derivative d^p applied to every component (exact coefficients)."""
    p = tuple(int(v) for v in p)
    if len(p) != s.dim or any(v < 0 for v in p):
        raise DomainError(f"bad derivative multi-index {p}")
    terms = {}
    for k, a in s.terms.items():
        if all(ki >= pi for ki, pi in zip(k, p)):
            terms[tuple(ki - pi for ki, pi in zip(k, p))] = a * _falling_ratio(k, p)
    return HermiteSeries(s.dim, s.out_dim, terms)


def series_divergence(s: HermiteSeries) -> HermiteSeries:
    """Scalar series sum_i d_i s_i; requires a square field (out_dim == dim)."""
    if s.out_dim != s.dim:
        raise DomainError("divergence needs out_dim == dim")
    terms: dict = {}
    for i in range(s.dim):
        e_i = tuple(1 if j == i else 0 for j in range(s.dim))
        comp = series_derivative(s.component(i), e_i)
        for k, a in comp.terms.items():
            if k in terms:
                terms[k] = terms[k] + a
            else:
                terms[k] = a.copy()
    return HermiteSeries(s.dim, 1, terms)


def series_sobolev_seminorm_sq(s: HermiteSeries, order: int) -> float:
    """Exact order-l weighted Sobolev seminorm squared under the Gaussian.

    sum_{|p|=l} sum_{k>=p} ||a_k||^2 (k!)^2 / (k-p)!, summed over components.
    """
    if order < 0:
        raise DomainError("order must be nonnegative")
    if order == 0:
        return series_l2_norm_sq(s)
    total = 0.0
    for p in multi_indices(s.dim, order, exact=True):
        for k, a in s.terms.items():
            if all(ki >= pi for ki, pi in zip(k, p)):
                kmp = tuple(ki - pi for ki, pi in zip(k, p))
                total += float(a @ a) * (_multi_factorial(k) ** 2
                                         / _multi_factorial(kmp))
    return total


def series_jacobian_frob_sq(s: HermiteSeries) -> float:
    """Exact E ||grad s||_F^2 under the Gaussian (order-1 seminorm squared)."""
    if s.out_dim != s.dim:
        raise DomainError("Jacobian needs out_dim == dim")
    return series_sobolev_seminorm_sq(s, 1)


def verify_gn_gaussian(s: HermiteSeries, alpha: int) -> dict:
    """Exact check of both Gaussian-weight interpolation inequalities.

    (i)  ||div f||^2 <= alpha D (||f||^2 + |f|_{W^{a,2}}^2)^{1/a} ||f||^{2(a-1)/a}
    (ii) E||grad f||_F^2 <= alpha D^{1-1/a} (D ||f||^2 + |f|_{W^{a,2}}^2)^{1/a}
                            ||f||^{2(a-1)/a}
    """
    if alpha < 2:
        raise DomainError("alpha must be an integer >= 2")
    if s.out_dim != s.dim:
        raise DomainError("square vector field required")
    D = s.dim
    norm_sq = series_l2_norm_sq(s)
    semi_sq = series_sobolev_seminorm_sq(s, alpha)
    lhs_div = series_l2_norm_sq(series_divergence(s))
    rhs_div = (alpha * D * (norm_sq + semi_sq) ** (1.0 / alpha)
               * norm_sq ** ((alpha - 1.0) / alpha))
    lhs_jac = series_jacobian_frob_sq(s)
    rhs_jac = (alpha * D ** (1.0 - 1.0 / alpha)
               * (D * norm_sq + semi_sq) ** (1.0 / alpha)
               * norm_sq ** ((alpha - 1.0) / alpha))
    return {"lhs_div": lhs_div, "rhs_div": rhs_div,
            "lhs_jac": lhs_jac, "rhs_jac": rhs_jac,
            "holds": bool(lhs_div <= rhs_div and lhs_jac <= rhs_jac)}


def verify_gn_weighted(ctx: OracleContext, s: HermiteSeries, alpha: int,
                       n_mc: int, seed: int) -> dict:
    """Monte Carlo check of the data-law-weighted divergence inequality.

    Norms under the data density are estimated over samples; derivatives of
    the series are exact.  The reported ``mc_se`` is a delta-method standard
    error of lhs - rhs, and ``holds`` allows a 3 sigma margin.
    """
    if alpha < 2:
        raise DomainError("alpha must be an integer >= 2")
    if ctx.t is not None or ctx.gen_scale != 1.0:
        raise DomainError("weighted check is defined for the time-zero law")
    if s.out_dim != s.dim or s.dim != ctx.ambient_dim:
        raise DomainError("series must be a square field in the ambient dimension")
    D = s.dim
    sigma_sq = ctx.sigma_eff_sq

    y = sample_noisy(ctx.spec, ctx.noise, n_mc, seed).rows
    table = hermite_table(y, s.max_degree)

    div_vals = series_divergence(s)(y, table)[:, 0]
    a_i = div_vals ** 2
    b_i = np.sum(s(y, table) ** 2, axis=1)
    c_i = np.zeros(n_mc)
    for p in multi_indices(D, alpha, exact=True):
        c_i += np.sum(series_derivative(s, p)(y, table) ** 2, axis=1)

    m1, m2, m3 = a_i.mean(), b_i.mean(), c_i.mean()
    if m2 <= 0.0:
        return {"lhs": float(m1), "rhs": 0.0, "gap": float(m1),
                "mc_se": 0.0, "holds": bool(m1 <= 0.0)}

    K = alpha * D / sigma_sq
    A = m2 + sigma_sq ** alpha * m3
    rhs = K * A ** (1.0 / alpha) * m2 ** (1.0 - 1.0 / alpha)
    # delta method for gap = m1 - rhs(m2, m3)
    d_m2 = -K * ((1.0 / alpha) * A ** (1.0 / alpha - 1.0) * m2 ** (1.0 - 1.0 / alpha)
                 + (1.0 - 1.0 / alpha) * A ** (1.0 / alpha) * m2 ** (-1.0 / alpha))
    d_m3 = -K * (1.0 / alpha) * A ** (1.0 / alpha - 1.0) \
        * sigma_sq ** alpha * m2 ** (1.0 - 1.0 / alpha)
    grad = np.array([1.0, d_m2, d_m3])
    cov = np.cov(np.stack([a_i, b_i, c_i]), ddof=1)
    se = float(np.sqrt(max(0.0, grad @ cov @ grad) / n_mc))
    gap = float(m1 - rhs)
    return {"lhs": float(m1), "rhs": float(rhs), "gap": gap,
            "mc_se": se, "holds": bool(gap <= 3.0 * se)}


def random_series(dim: int, max_degree: int, decay: float, seed: int,
                  out_dim: Optional[int] = None) -> HermiteSeries:
    """Random series with i.i.d. Gaussian coefficients scaled by decay**|k|."""
    if max_degree > MAX_DEGREE:
        raise DomainError(f"degree {max_degree} exceeds MAX_DEGREE={MAX_DEGREE}")
    out_dim = dim if out_dim is None else out_dim
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(1,))))
    terms = {}
    for k in multi_indices(dim, max_degree):
        coeff = decay ** sum(k) * rng.standard_normal(out_dim)
        if np.any(coeff != 0.0):
            terms[k] = coeff
    return HermiteSeries(dim, out_dim, terms)
