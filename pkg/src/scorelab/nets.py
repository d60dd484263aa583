"""GELU feedforward networks with exact forward-mode input derivatives.

A depth-L network is x -> A_1 x -> GELU(. - b_1) -> ... -> A_L . - b_L.
First-order input derivatives propagate a D-column tangent block alongside
values (one fused pass instead of D separate ones); order-2 and order-3
mixed partials propagate truncated multivariate Taylor jets, so divergences,
Jacobians and Sobolev-type monitors are exact up to roundoff.

Two structured score parameterizations wrap a network f:

    time-zero form:  s(x) = a (f(x) - x),          a in (1, 1/sigma_min^2]
    diffusion form:  s(x) = (m_t f(x) - x) / (m_t^2 st^2 + sigma_t^2),
                     st in [0, 1)

with the scalars squashed so the constraints hold by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import expit, ndtr

from .generators import DomainError, ou_coeffs

SPARSITY_THRESHOLD = 1e-8
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- activation ---------------------------------------------------------------

def gelu(x):
    x = np.asarray(x, dtype=float)
    return x * ndtr(x)


def gelu_prime(x):
    x = np.asarray(x, dtype=float)
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu_second(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x) * (2.0 - x * x)


def gelu_third(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x) * (x * x - 4.0) * x


def gelu_value_prime(x):
    """(GELU(x), GELU'(x)) sharing the cdf/pdf evaluations."""
    x = np.asarray(x, dtype=float)
    cdf = ndtr(x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return x * cdf, cdf + x * pdf


_GELU_DERIVS = (gelu, gelu_prime, gelu_second, gelu_third)


# -- parameters ---------------------------------------------------------------

@dataclass
class NetworkParams:
    """Dense weights A_j (W_j x W_{j-1}) and biases b_j (W_j), j = 1..L."""

    weights: list
    biases: list

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise DomainError("need one weight matrix and bias per layer")
        self.weights = [np.asarray(A, dtype=float) for A in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        for j, (A, b) in enumerate(zip(self.weights, self.biases)):
            if A.ndim != 2 or b.ndim != 1 or A.shape[0] != b.shape[0]:
                raise DomainError(f"layer {j + 1} shapes do not chain")
            if j > 0 and A.shape[1] != self.weights[j - 1].shape[0]:
                raise DomainError(f"layer {j + 1} input width mismatch")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[1],) + tuple(A.shape[0] for A in self.weights)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def b_effective(self) -> float:
        return max(max(np.abs(A).max(), np.abs(b).max(initial=0.0))
                   for A, b in zip(self.weights, self.biases))

    def s_effective(self, threshold: float = SPARSITY_THRESHOLD) -> int:
        return int(sum(int((np.abs(A) > threshold).sum())
                       + int((np.abs(b) > threshold).sum())
                       for A, b in zip(self.weights, self.biases)))

    def copy(self) -> "NetworkParams":
        return NetworkParams([A.copy() for A in self.weights],
                             [b.copy() for b in self.biases])


def _check_input(params: NetworkParams, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.in_dim:
        raise DomainError(f"input must have {params.in_dim} columns")
    return x


def net_forward(params: NetworkParams, x) -> np.ndarray:
    x = _check_input(params, x)
    h = x
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        h = gelu(h @ A.T - b)
    return h @ params.weights[-1].T - params.biases[-1]


def _tangent_affine(jac: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Apply A to a (n, dirs, w) tangent block via one reshaped gemm."""
    n, dirs, w = jac.shape
    return (jac.reshape(n * dirs, w) @ A.T).reshape(n, dirs, A.shape[0])


def net_value_and_jacobian(params: NetworkParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass carrying a full tangent block; returns (n,Do), (n,Do,Di)."""
    x = _check_input(params, x)
    n, din = x.shape
    h = x
    # tangents stored direction-major: jac[n, d, w] = d h_w / d x_d
    jac = np.broadcast_to(np.eye(din), (n, din, din)).copy()
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        u = h @ A.T - b
        h, d1 = gelu_value_prime(u)
        jac = _tangent_affine(jac, A)
        jac *= d1[:, None, :]
    A = params.weights[-1]
    return (h @ A.T - params.biases[-1],
            _tangent_affine(jac, A).swapaxes(1, 2))


def net_jacobian(params: NetworkParams, x) -> np.ndarray:
    return net_value_and_jacobian(params, x)[1]


def net_divergence(params: NetworkParams, x) -> np.ndarray:
    jac = net_jacobian(params, x)
    if jac.shape[-1] != jac.shape[-2]:
        raise DomainError("divergence needs a square network")
    return np.trace(jac, axis1=-2, axis2=-1)


# -- truncated multivariate Taylor jets (orders 2 and 3) ----------------------

class TaylorSpace:
    """Index bookkeeping for jets of total degree <= order in dim variables."""

    def __init__(self, dim: int, order: int):
        if order > 3:
            raise DomainError("jet order above 3 is unsupported "
                              "(nested-tangent cost grows with width**order)")
        self.dim = dim
        self.order = order
        self.terms: list[tuple] = []

        def rec(prefix, remaining):
            if len(prefix) == dim:
                self.terms.append(tuple(prefix))
                return
            for v in range(remaining + 1):
                rec(prefix + [v], remaining - v)

        rec([], order)
        self.index = {k: i for i, k in enumerate(self.terms)}
        self.degrees = np.array([sum(k) for k in self.terms])
        self.n_terms = len(self.terms)
        # sparse multiplication table: products with total degree <= order
        table = []
        for i, ki in enumerate(self.terms):
            for j, kj in enumerate(self.terms):
                if self.degrees[i] + self.degrees[j] <= order:
                    out = tuple(a + b for a, b in zip(ki, kj))
                    table.append((i, j, self.index[out]))
        self.mul_table = table

    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.zeros_like(a)
        for i, j, o in self.mul_table:
            out[:, o, :] += a[:, i, :] * b[:, j, :]
        return out

    def compose_scalar(self, jets: np.ndarray, derivs) -> np.ndarray:
        """Apply an elementwise map given its derivative functions at the value."""
        u0 = jets[:, 0, :]
        p = jets.copy()
        p[:, 0, :] = 0.0
        out = np.zeros_like(jets)
        out[:, 0, :] = derivs[0](u0)
        power = p
        fact = 1.0
        for m in range(1, self.order + 1):
            fact *= m
            out += (derivs[m](u0) / fact)[:, None, :] * power
            if m < self.order:
                power = self.mul(power, p)
        return out


@lru_cache(maxsize=None)
def _taylor_space(dim: int, order: int) -> TaylorSpace:
    return TaylorSpace(dim, order)


def net_jets(params: NetworkParams, x, order: int) -> tuple[TaylorSpace, np.ndarray]:
    """Taylor coefficients of the network output; jets shape (n, terms, Do).

    The mixed partial d^k f_l at x is k! times coefficient k of component l.
    """
    x = _check_input(params, x)
    n, din = x.shape
    space = _taylor_space(din, order)
    jets = np.zeros((n, space.n_terms, din))
    jets[:, 0, :] = x
    for d in range(din):
        e_d = tuple(1 if i == d else 0 for i in range(din))
        jets[:, space.index[e_d], d] = 1.0
    for A, b in zip(params.weights[:-1], params.biases[:-1]):
        jets = np.einsum("ntw,ow->nto", jets, A)
        jets[:, 0, :] -= b
        jets = space.compose_scalar(jets, _GELU_DERIVS)
    jets = np.einsum("ntw,ow->nto", jets, params.weights[-1])
    jets[:, 0, :] -= params.biases[-1]
    return space, jets


def jet_partial(space: TaylorSpace, jets: np.ndarray, k) -> np.ndarray:
    """Extract d^k f(x) for every point and component, shape (n, Do)."""
    k = tuple(int(v) for v in k)
    fact = 1.0
    for v in k:
        fact *= math.factorial(v)
    return fact * jets[:, space.index[k], :]


# -- structured score models --------------------------------------------------

def decode_gain(a_raw: float, sigma_min: float) -> float:
    """Squash an unconstrained scalar into (1, 1/sigma_min^2)."""
    return 1.0 + (sigma_min ** -2 - 1.0) * float(expit(a_raw))


def decode_gain_grad(a_raw: float, sigma_min: float) -> float:
    s = float(expit(a_raw))
    return (sigma_min ** -2 - 1.0) * s * (1.0 - s)


def decode_shrinkage(raw: float) -> float:
    """Squash an unconstrained scalar into (0, 1) subset of [0, 1)."""
    return float(expit(raw))


def decode_shrinkage_grad(raw: float) -> float:
    s = float(expit(raw))
    return s * (1.0 - s)


@dataclass
class ScoreModel:
    """Structured score estimator wrapping a square GELU network.

    variant "ism": s(x) = a (f(x) - x) with a decoded from ``a_raw``.
    variant "dsm": s(x) = (m_t f(x) - x) / (m_t^2 st^2 + sigma_t^2) with the
    shrinkage st decoded from ``sigma_tilde_raw`` at fixed time ``t``.

    ``monitors`` holds optional (C0, C1, C_alpha) budget targets checked by
    :func:`sobolev_monitor`; they are never enforced by the architecture.
    """

    variant: str
    net: NetworkParams
    a_raw: float = 0.0
    sigma_min: float = 0.5
    sigma_tilde_raw: float = 0.0
    t: Optional[float] = None
    monitors: Optional[dict] = None

    def __post_init__(self):
        if self.variant not in ("ism", "dsm"):
            raise DomainError(f"unknown score variant {self.variant!r}")
        if self.net.in_dim != self.net.out_dim:
            raise DomainError("score networks must be square (W_0 == W_L)")
        if self.variant == "ism" and not (0.0 < self.sigma_min < 1.0):
            raise DomainError("ism variant needs sigma_min in (0, 1)")
        if self.variant == "dsm":
            if self.t is None or self.t <= 0:
                raise DomainError("dsm variant needs a fixed time t > 0")

    @property
    def dim(self) -> int:
        return self.net.in_dim

    @property
    def a(self) -> float:
        return decode_gain(self.a_raw, self.sigma_min)

    @property
    def sigma_tilde(self) -> float:
        return decode_shrinkage(self.sigma_tilde_raw)

    def _linear_coeffs(self) -> tuple[float, float]:
        """(p, q) so that s(x) = p f(x) - q x, div s = p div f - q D, etc."""
        if self.variant == "ism":
            a = self.a
            return a, a
        m_t, sig_sq = ou_coeffs(self.t)
        denom = m_t ** 2 * self.sigma_tilde ** 2 + sig_sq
        return m_t / denom, 1.0 / denom

    def score(self, x) -> np.ndarray:
        p, q = self._linear_coeffs()
        x = _check_input(self.net, x)
        return p * net_forward(self.net, x) - q * x

    def score_divergence(self, x) -> np.ndarray:
        p, q = self._linear_coeffs()
        return p * net_divergence(self.net, x) - q * self.dim

    def score_jacobian(self, x) -> np.ndarray:
        p, q = self._linear_coeffs()
        jac = net_jacobian(self.net, x)
        return p * jac - q * np.eye(self.dim)[None, :, :]

    def score_with_divergence(self, x) -> tuple[np.ndarray, np.ndarray]:
        p, q = self._linear_coeffs()
        x = _check_input(self.net, x)
        val, jac = net_value_and_jacobian(self.net, x)
        div = np.trace(jac, axis1=-2, axis2=-1)
        return p * val - q * x, p * div - q * self.dim

    def copy(self) -> "ScoreModel":
        return ScoreModel(variant=self.variant, net=self.net.copy(),
                          a_raw=self.a_raw, sigma_min=self.sigma_min,
                          sigma_tilde_raw=self.sigma_tilde_raw, t=self.t,
                          monitors=None if self.monitors is None
                          else dict(self.monitors))

    # -- checkpoint serialization (portable JSON, bit-exact round trip) ------

    def to_json_dict(self) -> dict:
        out = {
            "variant": self.variant,
            "widths": list(self.net.widths),
            "weights": [A.ravel().tolist() for A in self.net.weights],
            "biases": [b.tolist() for b in self.net.biases],
            "monitors": self.monitors,
        }
        if self.variant == "ism":
            out["a_raw"] = self.a_raw
            out["sigma_min"] = self.sigma_min
        else:
            out["sigma_tilde_raw"] = self.sigma_tilde_raw
            out["t"] = self.t
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ScoreModel":
        widths = obj["widths"]
        weights = [np.asarray(w, dtype=float).reshape(widths[j + 1], widths[j])
                   for j, w in enumerate(obj["weights"])]
        biases = [np.asarray(b, dtype=float) for b in obj["biases"]]
        net = NetworkParams(weights, biases)
        if obj["variant"] == "ism":
            return cls("ism", net, a_raw=float(obj["a_raw"]),
                       sigma_min=float(obj["sigma_min"]),
                       monitors=obj.get("monitors"))
        return cls("dsm", net, sigma_tilde_raw=float(obj["sigma_tilde_raw"]),
                   t=float(obj["t"]), monitors=obj.get("monitors"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "ScoreModel":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


class AffineScore:
    """s(x) = c + M x; handy exact score for tests and identity diagnostics."""

    def __init__(self, c, M):
        self.c = np.asarray(c, dtype=float)
        self.M = np.asarray(M, dtype=float)

    def score(self, x) -> np.ndarray:
        return np.atleast_2d(x) @ self.M.T + self.c

    def score_divergence(self, x) -> np.ndarray:
        n = np.atleast_2d(x).shape[0]
        return np.full(n, float(np.trace(self.M)))

    def score_jacobian(self, x) -> np.ndarray:
        n = np.atleast_2d(x).shape[0]
        return np.broadcast_to(self.M, (n,) + self.M.shape).copy()

    def score_with_divergence(self, x):
        return self.score(x), self.score_divergence(x)


# -- monitors and audits ------------------------------------------------------

def sobolev_monitor(model: ScoreModel, probe: np.ndarray, alpha: int) -> dict:
    """Estimate the inner network's seminorm monitors over a probe cloud.

    Sup-type quantities (orders 0 and 1) are maxima over the cloud; the
    order-alpha quantity is the Monte Carlo L2 seminorm per component, maxed
    over components.  Violations compare against the configured budgets with
    the noise-scale factors the score classes prescribe.
    """
    if alpha not in (2, 3):
        raise DomainError("monitor order must be 2 or 3")
    probe = _check_input(model.net, probe)
    val, jac = net_value_and_jacobian(model.net, probe)
    c0_hat = float(np.abs(val).max())
    c1_hat = float(np.abs(jac).max())
    space, jets = net_jets(model.net, probe, alpha)
    acc = np.zeros((probe.shape[0], model.dim))
    for k in space.terms:
        if sum(k) == alpha:
            acc += jet_partial(space, jets, k) ** 2
    calpha_hat = float(np.sqrt(acc.mean(axis=0).max()))

    violations = {}
    if model.monitors:
        c0 = model.monitors.get("C0")
        c1 = model.monitors.get("C1")
        calpha = model.monitors.get("C_alpha")
        if c0 is not None:
            violations["C0"] = c0_hat > c0
        if model.variant == "ism":
            if c1 is not None:
                violations["C1"] = c1_hat > c1 * model.sigma_min ** -2
            if calpha is not None:
                violations["C_alpha"] = (
                    calpha_hat > calpha * model.sigma_min ** (-2 * alpha))
        else:
            _, sig_sq = ou_coeffs(model.t)
            if calpha is not None:
                violations["C_alpha"] = calpha_hat > calpha * sig_sq ** -alpha
    return {"C0_hat": c0_hat, "C1_hat": c1_hat, "Calpha_hat": calpha_hat,
            "violations": violations}


def perturbation_stability_audit(params: NetworkParams, epsilon: float, R: float,
                                 trials: int, seed: int,
                                 grid_points: int = 256) -> dict:
    """Bound check: weight perturbations move values and divergences by O(eps).

    Every weight entry is perturbed by at most ``epsilon`` (bias perturbations
    rescaled so their Euclidean norm stays within epsilon, matching how the
    bound measures bias proximity).  Gaps are measured over a point cloud in
    [-R, R]^D against

        value:      sqrt(D) 4^L (B v 1)^L (maxwidth + 1)^L (R v 1) eps
        divergence: D 16^L (maxwidth + 1)^(2L-1) (B v 1)^(2L-1) (R v 1) eps
    """
    if epsilon < 0:
        raise DomainError("epsilon must be nonnegative")
    if params.in_dim != params.out_dim:
        raise DomainError("audit needs a square network")
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(2,))))
    D = params.in_dim
    L = params.depth
    width = max(params.widths)
    x = rng.uniform(-R, R, size=(grid_points, D))

    worst = {"value_gap": 0.0, "value_bound": 0.0,
             "div_gap": 0.0, "div_bound": 0.0, "holds": True}
    for _ in range(max(1, trials)):
        eps_eff = 0.0
        pert = params.copy()
        for j in range(L):
            dA = rng.uniform(-epsilon, epsilon, size=pert.weights[j].shape)
            db = rng.uniform(-epsilon, epsilon, size=pert.biases[j].shape)
            nb = np.linalg.norm(db)
            if nb > epsilon and nb > 0:
                db *= epsilon / nb
            pert.weights[j] = pert.weights[j] + dA
            pert.biases[j] = pert.biases[j] + db
            eps_eff = max(eps_eff,
                          float(np.abs(dA).max(initial=0.0)),
                          float(np.linalg.norm(db)))
        B = max(params.b_effective(), pert.b_effective())
        f1, j1 = net_value_and_jacobian(params, x)
        f2, j2 = net_value_and_jacobian(pert, x)
        value_gap = float(np.linalg.norm(f1 - f2, axis=1).max())
        div_gap = float(np.abs(np.trace(j1 - j2, axis1=-2, axis2=-1)).max())
        value_bound = (math.sqrt(D) * 4.0 ** L * max(B, 1.0) ** L
                       * (width + 1.0) ** L * max(R, 1.0) * eps_eff)
        div_bound = (D * 16.0 ** L * (width + 1.0) ** (2 * L - 1)
                     * max(B, 1.0) ** (2 * L - 1) * max(R, 1.0) * eps_eff)
        ok = value_gap <= value_bound + 1e-12 and div_gap <= div_bound + 1e-12
        if not ok or value_gap > worst["value_gap"]:
            worst.update(value_gap=value_gap, value_bound=value_bound,
                         div_gap=div_gap, div_bound=div_bound,
                         holds=worst["holds"] and ok)
        worst["holds"] = worst["holds"] and ok
    return worst
