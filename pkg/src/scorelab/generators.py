"""Synthetic data model: a bounded generator on the unit cube plus Gaussian noise.

Samples are drawn as ``g(U) + sigma * xi`` with ``U`` uniform on ``[0, 1]^d``
and ``xi`` standard Gaussian in ``R^D``.  Four closed-form generator families
are provided (constant, affine, trigonometric, polynomial) so that exact
score oracles are available downstream.  The forward noising channel is the
Ornstein-Uhlenbeck process, whose conditional law at time ``t`` is Gaussian
with mean ``m_t * x0`` and variance ``1 - m_t**2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

GENERATOR_KINDS = ("constant", "affine", "trigonometric", "polynomial")

# grid used to double-check the analytic sup-norm bound at construction
_SUP_CHECK_POINTS = 10_000


class DomainError(ValueError):
    """Raised when an argument lies outside an operation's domain."""


def _rng(seed, *tags) -> np.random.Generator:
    """Counter-based generator keyed by (seed, tags).

    Philox is splittable: distinct tag tuples give independent streams, so
    parallel sweeps reproduce bit-exactly regardless of scheduling.
    """
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                 spawn_key=tuple(int(t) & (2**64 - 1) for t in tags))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class GeneratorSpec:
    """Closed-form map g: [0,1]^d -> R^D with sup Euclidean norm <= 1.

    ``coeffs`` is a kind-specific table:

    * constant:       {"value": [D floats]}
    * affine:         {"matrix": D x d, "offset": [D]}
    * trigonometric:  {"amplitude": [D], "frequency": D x d ints, "phase": [D]},
                      component i is amplitude[i] * sin(2*pi*frequency[i]@u + phase[i])
    * polynomial:     {"terms": [{"exponents": [d ints], "coeff": [D]}...]}

    ``beta`` is nominal smoothness metadata used only for rate targets.
    """

    kind: str
    d: int
    D: int
    coeffs: dict
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise DomainError(f"unknown generator kind {self.kind!r}")
        min_d = 0 if self.kind == "constant" else 1
        if not (min_d <= self.d <= self.D):
            raise DomainError(f"need {min_d} <= d <= D, got d={self.d}, D={self.D}")
        if self.beta <= 0:
            raise DomainError("beta must be positive")
        bound = self.analytic_sup_bound()
        if bound > 1.0 + 1e-12:
            raise DomainError(
                f"sup |g| bound {bound:.6g} exceeds 1; rescale coefficients "
                "(see make_* constructors with normalize=True)")
        sup = self._grid_sup()
        if sup > 1.0 + 1e-9:
            raise DomainError(f"grid sup |g| = {sup:.6g} exceeds 1")

    # -- evaluation ---------------------------------------------------------

    def __call__(self, u: np.ndarray) -> np.ndarray:
        """Evaluate g at a batch of latent points, shape (n, d) -> (n, D)."""
        u = np.asarray(u, dtype=float)
        squeeze = u.ndim == 1
        if squeeze:
            u = u[None, :]
        if u.shape[1] != self.d:
            raise DomainError(f"latent points must have {self.d} columns")
        if u.size and (u.min() < -1e-12 or u.max() > 1 + 1e-12):
            raise DomainError("latent points must lie in the unit cube")
        out = self._eval(u)
        return out[0] if squeeze else out

    def _eval(self, u: np.ndarray) -> np.ndarray:
        n = u.shape[0]
        c = self.coeffs
        if self.kind == "constant":
            return np.tile(np.asarray(c["value"], dtype=float), (n, 1))
        if self.kind == "affine":
            A = np.asarray(c["matrix"], dtype=float)
            b = np.asarray(c["offset"], dtype=float)
            return u @ A.T + b
        if self.kind == "trigonometric":
            amp = np.asarray(c["amplitude"], dtype=float)
            freq = np.asarray(c["frequency"], dtype=float)
            phase = np.asarray(c["phase"], dtype=float)
            return amp * np.sin(2.0 * np.pi * u @ freq.T + phase)
        # polynomial
        out = np.zeros((n, self.D))
        for term in c["terms"]:
            expo = np.asarray(term["exponents"], dtype=int)
            coef = np.asarray(term["coeff"], dtype=float)
            mono = np.prod(u ** expo, axis=1)
            out += mono[:, None] * coef
        return out

    # -- norm bookkeeping ---------------------------------------------------

    def analytic_sup_bound(self) -> float:
        """Upper bound on sup_u ||g(u)||, exact for constant/affine."""
        c = self.coeffs
        if self.kind == "constant":
            return float(np.linalg.norm(np.asarray(c["value"], dtype=float)))
        if self.kind == "affine":
            # affine maps attain their max norm on cube vertices
            A = np.asarray(c["matrix"], dtype=float)
            b = np.asarray(c["offset"], dtype=float)
            best = 0.0
            for mask in range(2 ** self.d):
                v = np.array([(mask >> j) & 1 for j in range(self.d)], dtype=float)
                best = max(best, float(np.linalg.norm(A @ v + b)))
            return best
        if self.kind == "trigonometric":
            return float(np.linalg.norm(np.asarray(c["amplitude"], dtype=float)))
        per_comp = np.zeros(self.D)
        for term in c["terms"]:
            per_comp += np.abs(np.asarray(term["coeff"], dtype=float))
        return float(np.linalg.norm(per_comp))

    def _grid_sup(self) -> float:
        if self.d == 0:
            return float(np.linalg.norm(self(np.zeros((1, 0)))))
        per_axis = max(2, int(round(_SUP_CHECK_POINTS ** (1.0 / self.d))))
        axes = [np.linspace(0.0, 1.0, per_axis)] * self.d
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.d)
        return float(np.linalg.norm(self(grid), axis=1).max())

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "D": self.D,
                "coeffs": self.coeffs, "beta": self.beta}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GeneratorSpec":
        unknown = set(obj) - {"kind", "d", "D", "coeffs", "beta"}
        if unknown:
            raise DomainError(f"unknown generator keys: {sorted(unknown)}")
        return cls(kind=obj["kind"], d=int(obj["d"]), D=int(obj["D"]),
                   coeffs=obj["coeffs"], beta=float(obj.get("beta", 1.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSpec":
        return cls.from_json_dict(json.loads(text))


# -- convenience constructors (auto-rescaled so the sup bound is <= 1) -------

def make_constant(value, beta: float = 1.0, d: int = 0) -> GeneratorSpec:
    value = np.asarray(value, dtype=float)
    return GeneratorSpec("constant", d, len(value), {"value": value.tolist()}, beta)


def make_affine(matrix, offset=None, beta: float = 1.0,
                normalize: bool = True) -> GeneratorSpec:
    A = np.atleast_2d(np.asarray(matrix, dtype=float))
    D, d = A.shape
    b = np.zeros(D) if offset is None else np.asarray(offset, dtype=float)
    # ||Au + b|| is convex in u, so its max over the cube sits on a vertex
    bound = max(float(np.linalg.norm(
        A @ np.array([(mask >> j) & 1 for j in range(d)], dtype=float) + b))
        for mask in range(2 ** d))
    if normalize and bound > 1.0:
        A, b = A / bound, b / bound
    return GeneratorSpec("affine", d, D,
                         {"matrix": A.tolist(), "offset": b.tolist()}, beta)


def make_trigonometric(amplitude, frequency, phase=None, beta: float = 1.0,
                       normalize: bool = True) -> GeneratorSpec:
    amp = np.asarray(amplitude, dtype=float)
    freq = np.atleast_2d(np.asarray(frequency, dtype=float))
    D, d = freq.shape
    ph = np.zeros(D) if phase is None else np.asarray(phase, dtype=float)
    nrm = float(np.linalg.norm(amp))
    if normalize and nrm > 1.0:
        amp = amp / nrm
    return GeneratorSpec("trigonometric", d, D,
                         {"amplitude": amp.tolist(), "frequency": freq.tolist(),
                          "phase": ph.tolist()}, beta)


def make_polynomial(terms, d: int, D: int, beta: float = 1.0,
                    normalize: bool = True) -> GeneratorSpec:
    terms = [{"exponents": list(map(int, t["exponents"])),
              "coeff": list(map(float, t["coeff"]))} for t in terms]
    per_comp = np.zeros(D)
    for t in terms:
        per_comp += np.abs(np.asarray(t["coeff"]))
    bound = float(np.linalg.norm(per_comp))
    if normalize and bound > 1.0:
        for t in terms:
            t["coeff"] = [c / bound for c in t["coeff"]]
    return GeneratorSpec("polynomial", d, D, {"terms": terms}, beta)


def circle_generator(D: int = 2, radius: float = 0.5, beta: float = 1.0) -> GeneratorSpec:
    """Symmetric two-branch trigonometric map: first two coordinates trace a circle."""
    amp = [radius, radius] + [0.0] * (D - 2)
    freq = [[1.0]] * D
    phase = [0.0, 0.5 * np.pi] + [0.0] * (D - 2)
    return make_trigonometric(amp, freq, phase, beta=beta)


@dataclass(frozen=True)
class NoiseConfig:
    """Noise scale sigma with a known lower bound sigma_min.

    sigma == 0 (with sigma_min == 0) is accepted as a degenerate noiseless
    config for sampling only; score oracles and estimators require sigma > 0.
    """

    sigma: float
    sigma_min: Optional[float] = None

    def __post_init__(self):
        sm = self.sigma if self.sigma_min is None else self.sigma_min
        object.__setattr__(self, "sigma_min", sm)
        if not (0.0 < sm <= self.sigma < 1.0):
            if not (self.sigma == 0.0 and sm == 0.0):
                raise DomainError(
                    f"need 0 < sigma_min <= sigma < 1, got ({sm}, {self.sigma})")

    def to_json_dict(self) -> dict:
        return {"sigma": self.sigma, "sigma_min": self.sigma_min}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "NoiseConfig":
        unknown = set(obj) - {"sigma", "sigma_min"}
        if unknown:
            raise DomainError(f"unknown noise keys: {sorted(unknown)}")
        return cls(sigma=float(obj["sigma"]),
                   sigma_min=float(obj["sigma_min"]) if "sigma_min" in obj else None)


def ou_coeffs(t: float) -> tuple[float, float]:
    """Mean decay and conditional variance of the forward OU channel at time t."""
    if t < 0:
        raise DomainError("time must be nonnegative")
    m_t = math.exp(-t)
    return m_t, 1.0 - math.exp(-2.0 * t)


@dataclass(frozen=True)
class DataBatch:
    """Immutable sample matrix plus the randomness that produced it.

    ``rows`` holds the observed points (X_t for OU pairs).  For provenance
    "ou_pair", ``x0`` and ``z`` store the clean points and the exact standard
    normals, so ``rows == m_t * x0 + sigma_t * z`` bit-for-bit.
    """

    rows: np.ndarray
    seed: int
    provenance: str  # "clean" | "noisy" | "ou_pair"
    t: Optional[float] = None
    x0: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None

    def __post_init__(self):
        for arr in (self.rows, self.x0, self.z):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def to_csv(self, path) -> None:
        header = ",".join(f"x{i}" for i in range(self.dim))
        np.savetxt(path, self.rows, delimiter=",", header=header, comments="")

    def ou_residual(self) -> np.ndarray:
        """rows - (m_t * x0 + sigma_t * z), same operation order as the sampler."""
        if self.provenance != "ou_pair":
            raise DomainError("residual defined only for OU pairs")
        m_t, sig_sq = ou_coeffs(self.t)
        return self.rows - (m_t * self.x0 + math.sqrt(sig_sq) * self.z)


def sample_clean(spec: GeneratorSpec, n: int, seed: int) -> DataBatch:
    """Draw g(U) with U uniform on the latent cube (no ambient noise)."""
    if n < 1:
        raise DomainError("need n >= 1")
    rng = _rng(seed, 0)
    u = rng.random((n, spec.d))
    return DataBatch(rows=spec(u), seed=seed, provenance="clean")


def sample_noisy(spec: GeneratorSpec, noise: NoiseConfig, n: int, seed: int) -> DataBatch:
    """Draw g(U) + sigma * xi; the data law every estimator sees."""
    if n < 1:
        raise DomainError("need n >= 1")
    rng = _rng(seed, 0)
    u = rng.random((n, spec.d))
    xi = rng.standard_normal((n, spec.D))
    return DataBatch(rows=spec(u) + noise.sigma * xi, seed=seed, provenance="noisy")


def sample_ou_pair(spec: GeneratorSpec, noise: NoiseConfig, t: float,
                   n: int, seed: int) -> DataBatch:
    """Draw (X0, X_t, Z) with X_t = m_t X0 + sigma_t Z along the OU channel."""
    if t <= 0:
        raise DomainError("OU pairs require t > 0")
    if n < 1:
        raise DomainError("need n >= 1")
    rng = _rng(seed, 0)
    u = rng.random((n, spec.d))
    xi = rng.standard_normal((n, spec.D))
    x0 = spec(u) + noise.sigma * xi
    z = rng.standard_normal((n, spec.D))
    m_t, sig_sq = ou_coeffs(t)
    x_t = m_t * x0 + math.sqrt(sig_sq) * z
    return DataBatch(rows=x_t, seed=seed, provenance="ou_pair", t=t, x0=x0, z=z)
