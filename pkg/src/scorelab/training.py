"""Empirical risk minimization over the structured score classes.

Gradients are exact: the implicit objective's divergence term is handled by
propagating the input-tangent block forward and running the adjoint pass
through the augmented (value, Jacobian) computation, so d/dtheta of
trace(grad f) comes out in one sweep.  The optimizer is plain Adam with a
best-seen full-batch snapshot standing in for the exact minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .generators import DataBatch, DomainError, ou_coeffs
from .nets import (NetworkParams, ScoreModel, decode_gain_grad,
                   decode_shrinkage_grad, gelu_second, gelu_value_prime,
                   net_value_and_jacobian)
from .objectives import empirical_risk
from .oracle import sample_marginal, true_score

_TRAINABLE_GROUPS = ("weights", "biases", "scalar")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    method: str = "ism"                    # "ism" | "dsm"
    t: Optional[float] = None              # diffusion time for "dsm"
    arch: tuple = (2, 16, 2)               # widths W_0..W_L
    sigma_min: float = 0.5
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    penalty_weight: float = 0.0
    monitors: Optional[dict] = None        # (C0, C1, C_alpha) budget targets
    lr_schedule: str = "constant"          # "constant" | "cosine"
    grad_check: bool = False
    trainable: tuple = _TRAINABLE_GROUPS

    def __post_init__(self):
        if self.method not in ("ism", "dsm"):
            raise DomainError(f"unknown method {self.method!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown schedule {self.lr_schedule!r}")
        if self.method == "dsm" and (self.t is None or self.t <= 0):
            raise DomainError("dsm training needs t > 0")
        if self.step_size <= 0:
            raise DomainError("step size must be positive")
        if self.epochs < 0:
            raise DomainError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise DomainError("batch size must be >= 1")
        if any(g not in _TRAINABLE_GROUPS for g in self.trainable):
            raise DomainError(f"trainable groups must be among {_TRAINABLE_GROUPS}")
        self.arch = tuple(int(w) for w in self.arch)


@dataclass
class TrainHistory:
    risk: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    scalar: list = field(default_factory=list)       # decoded a or sigma_tilde
    monitor_c0: list = field(default_factory=list)
    monitor_c1: list = field(default_factory=list)
    oracle_error: list = field(default_factory=list)

    def epoch_count(self) -> int:
        return len(self.risk)


def init_params(arch, seed: int) -> NetworkParams:
    """Zero biases, Glorot-uniform weights: U(-a, a), a = sqrt(6/(fin+fout))."""
    arch = tuple(int(w) for w in arch)
    if len(arch) < 2 or any(w < 1 for w in arch):
        raise DomainError(f"architecture widths must all be >= 1, got {arch}")
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(4,))
    rng = np.random.Generator(np.random.Philox(seq))
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


@dataclass
class ParamGradient:
    """Gradient structure mirroring (weights, biases, scalar_raw)."""

    weights: list
    biases: list
    scalar: float

    def flat(self) -> np.ndarray:
        parts = [g.ravel() for g in self.weights] + [g.ravel() for g in self.biases]
        parts.append(np.array([self.scalar]))
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def _tmap(block: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Apply M to the trailing axis of a (n, dirs, w) block; one gemm."""
    n, dirs, w = block.shape
    return (block.reshape(n * dirs, w) @ M.T).reshape(n, dirs, M.shape[0])


def _forward_with_tangent(net: NetworkParams, x):
    """Forward pass retaining per-layer state for the adjoint sweep.

    Tangent blocks are direction-major: jac[n, d, w] = d h_w / d x_d; the
    returned jf keeps that layout (trace over its last two axes is still the
    divergence since the seed block is the identity).
    """
    n, din = x.shape
    h = x
    jac = np.broadcast_to(np.eye(din), (n, din, din)).copy()
    cache = []
    for A, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ A.T - b
        p = _tmap(jac, A)
        hz, d1 = gelu_value_prime(z)
        cache.append((h, jac, z, p, d1))
        h = hz
        jac = d1[:, None, :] * p
    A = net.weights[-1]
    f = h @ A.T - net.biases[-1]
    jf = _tmap(jac, A)
    cache.append((h, jac, None, None, None))
    return f, jf, cache


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_{n,d} a[n,d,o] b[n,d,w] -> (o, w), via one gemm."""
    n, d, o = a.shape
    return a.reshape(n * d, o).T @ b.reshape(n * d, -1)


def _backward(net: NetworkParams, cache, g_f, g_jf):
    """Adjoint sweep through the (value, Jacobian) augmented forward pass."""
    gw = [np.zeros_like(A) for A in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    h_last, jac_last, _, _, _ = cache[-1]
    A = net.weights[-1]
    gw[-1] = g_f.T @ h_last
    if g_jf is not None:
        gw[-1] += _cross(g_jf, jac_last)
    gb[-1] = -g_f.sum(axis=0)
    g_h = g_f @ A
    g_jac = _tmap(g_jf, A.T) if g_jf is not None else None
    for j in range(net.depth - 2, -1, -1):
        h_prev, jac_prev, z, p, d1 = cache[j]
        if g_jac is not None:
            g_p = d1[:, None, :] * g_jac
            g_d1 = (g_jac * p).sum(axis=1)
            g_z = g_h * d1 + g_d1 * gelu_second(z)
        else:
            g_p = None
            g_z = g_h * d1
        A = net.weights[j]
        gw[j] = g_z.T @ h_prev
        gb[j] = -g_z.sum(axis=0)
        if g_p is not None:
            gw[j] += _cross(g_p, jac_prev)
            g_jac = _tmap(g_p, A.T)
        g_h = g_z @ A
    return gw, gb


def _ism_grad(model: ScoreModel, y: np.ndarray) -> tuple[float, ParamGradient]:
    n, D = y.shape
    a = model.a
    f, jf, cache = _forward_with_tangent(model.net, y)
    s = a * (f - y)
    tr = np.trace(jf, axis1=-2, axis2=-1)
    losses = 0.5 * np.sum(s * s, axis=1) + a * (tr - D)
    risk = float(losses.mean())

    g_f = (a / n) * s
    g_jf = np.broadcast_to((a / n) * np.eye(D), (n, D, D)).copy()
    gw, gb = _backward(model.net, cache, g_f, g_jf)
    g_a = float(np.mean(np.sum(s * (f - y), axis=1) + (tr - D)))
    g_scalar = g_a * decode_gain_grad(model.a_raw, model.sigma_min)
    return risk, ParamGradient(gw, gb, g_scalar)


def _dsm_grad(model: ScoreModel, x0: np.ndarray, z: np.ndarray) -> tuple[float, ParamGradient]:
    n, D = x0.shape
    m_t, sig_sq = ou_coeffs(model.t)
    sigma_t = math.sqrt(sig_sq)
    st = model.sigma_tilde
    denom = m_t ** 2 * st ** 2 + sig_sq
    x_t = m_t * x0 + sigma_t * z

    h = x_t
    cache = [h]
    net = model.net
    d1s = []
    for A, b in zip(net.weights[:-1], net.biases[:-1]):
        hz, d1 = gelu_value_prime(h @ A.T - b)
        d1s.append(d1)
        h = hz
        cache.append(h)
    f = h @ net.weights[-1].T - net.biases[-1]

    s = (m_t * f - x_t) / denom
    r = s + z / sigma_t
    losses = np.sum(r * r, axis=1)
    risk = float(losses.mean())

    g_f = (2.0 * m_t / (denom * n)) * r
    gw = [np.zeros_like(A) for A in net.weights]
    gb = [np.zeros_like(b) for b in net.biases]
    gw[-1] = g_f.T @ cache[-1]
    gb[-1] = -g_f.sum(axis=0)
    g_h = g_f @ net.weights[-1]
    for j in range(net.depth - 2, -1, -1):
        g_z = g_h * d1s[j]
        gw[j] = g_z.T @ cache[j]
        gb[j] = -g_z.sum(axis=0)
        g_h = g_z @ net.weights[j]

    g_denom = float(np.mean(np.sum(r * (-s / denom), axis=1)) * 2.0)
    g_st = g_denom * 2.0 * m_t ** 2 * st
    g_scalar = g_st * decode_shrinkage_grad(model.sigma_tilde_raw)
    return risk, ParamGradient(gw, gb, g_scalar)


def _penalty_grad(model: ScoreModel, y: np.ndarray,
                  weight: float) -> tuple[float, Optional[ParamGradient]]:
    """Soft penalty on the sup-type monitor budgets (orders 0 and 1).

    Penalizes mean squared hinge excess over every violating entry in the
    batch, which upper-bounds the sup-monitor hinge and gives a much denser
    gradient than the arg-max alone.
    """
    budgets = model.monitors or {}
    c0 = budgets.get("C0")
    c1 = budgets.get("C1") if model.variant == "ism" else None
    if weight <= 0.0 or (c0 is None and c1 is None):
        return 0.0, None
    f, jf, cache = _forward_with_tangent(model.net, y)
    n = f.shape[0]
    penalty = 0.0
    g_f = np.zeros_like(f)
    g_jf = np.zeros_like(jf)
    if c0 is not None:
        excess = np.maximum(0.0, np.abs(f) - c0)
        if excess.any():
            penalty += weight * float((excess ** 2).sum()) / n
            g_f += (2.0 * weight / n) * excess * np.sign(f)
    if c1 is not None:
        limit = c1 * model.sigma_min ** -2
        excess = np.maximum(0.0, np.abs(jf) - limit)
        if excess.any():
            penalty += weight * float((excess ** 2).sum()) / n
            g_jf += (2.0 * weight / n) * excess * np.sign(jf)
    if penalty == 0.0:
        return 0.0, None
    gw, gb = _backward(model.net, cache, g_f, g_jf)
    return penalty, ParamGradient(gw, gb, 0.0)


def param_gradient(model: ScoreModel, batch: DataBatch, method: str) -> ParamGradient:
    """Exact gradient of the empirical risk w.r.t. all parameters.

    Raises on non-finite output, reporting the first offending sample.
    """
    if method == "ism":
        if batch.provenance != "noisy":
            raise DomainError("implicit gradient needs a noisy marginal batch")
        _, grad = _ism_grad(model, batch.rows)
    elif method == "dsm":
        if batch.provenance != "ou_pair":
            raise DomainError("denoising gradient needs an OU pair batch")
        if batch.t != model.t:
            raise DomainError(f"batch time {batch.t} != model time {model.t}")
        _, grad = _dsm_grad(model, batch.x0, batch.z)
    else:
        raise DomainError(f"unknown method {method!r}")
    if not np.all(np.isfinite(grad.flat())):
        rep = empirical_risk(model, batch, method)
        bad = np.flatnonzero(~np.isfinite(rep.per_sample))
        where = int(bad[0]) if bad.size else -1
        raise DomainError(f"non-finite gradient (first bad sample index {where})")
    return grad


def _fd_gradient(model: ScoreModel, batch: DataBatch, method: str,
                 step: float = 1e-5) -> ParamGradient:
    """Central finite differences of the empirical risk; test oracle."""

    def risk_of(m):
        return empirical_risk(m, batch, method).value

    gw, gb = [], []
    for j, A in enumerate(model.net.weights):
        g = np.zeros_like(A)
        for idx in np.ndindex(A.shape):
            m = model.copy()
            m.net.weights[j][idx] += step
            up = risk_of(m)
            m.net.weights[j][idx] -= 2 * step
            dn = risk_of(m)
            g[idx] = (up - dn) / (2 * step)
        gw.append(g)
    for j, b in enumerate(model.net.biases):
        g = np.zeros_like(b)
        for idx in np.ndindex(b.shape):
            m = model.copy()
            m.net.biases[j][idx] += step
            up = risk_of(m)
            m.net.biases[j][idx] -= 2 * step
            dn = risk_of(m)
            g[idx] = (up - dn) / (2 * step)
        gb.append(g)
    m_up, m_dn = model.copy(), model.copy()
    if model.variant == "ism":
        m_up.a_raw += step
        m_dn.a_raw -= step
    else:
        m_up.sigma_tilde_raw += step
        m_dn.sigma_tilde_raw -= step
    g_scalar = (risk_of(m_up) - risk_of(m_dn)) / (2 * step)
    return ParamGradient(gw, gb, g_scalar)


def gradient_check(model: ScoreModel, batch: DataBatch, method: str,
                   step: float = 1e-5) -> float:
    """Max mixed relative/absolute error between exact and FD gradients."""
    exact = param_gradient(model, batch, method).flat()
    approx = _fd_gradient(model, batch, method, step).flat()
    scale = np.maximum(np.abs(approx), 1e-6 * (1.0 + np.abs(approx).max()))
    return float((np.abs(exact - approx) / scale).max())


class _Adam:
    def __init__(self, shapes, step, beta1, beta2, eps):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.step, self.b1, self.b2, self.eps = step, beta1, beta2, eps
        self.t = 0

    def update(self, grads, scale: float = 1.0) -> list:
        self.t += 1
        out = []
        for i, g in enumerate(grads):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            out.append(-scale * self.step * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def _epoch_stats(model: ScoreModel, data: DataBatch,
                 method: str) -> tuple[float, float, float]:
    """Full-batch risk plus cheap sup monitors, sharing the forward pass."""
    if method == "ism":
        f, jf, _ = _forward_with_tangent(model.net, data.rows)
        a = model.a
        s = a * (f - data.rows)
        tr = np.trace(jf, axis1=-2, axis2=-1)
        risk = float(np.mean(0.5 * np.sum(s * s, axis=1)
                             + a * (tr - data.dim)))
        m = min(256, data.n)
        return risk, float(np.abs(f[:m]).max()), float(np.abs(jf[:m]).max())
    risk = empirical_risk(model, data, method).value
    m = min(256, data.n)
    val, jac = net_value_and_jacobian(model.net, data.rows[:m])
    return risk, float(np.abs(val).max()), float(np.abs(jac).max())


def _fresh_dsm_batch(batch: DataBatch, epoch: int) -> DataBatch:
    """Resample the conditional noise (one draw per point per epoch)."""
    seq = np.random.SeedSequence(entropy=int(batch.seed) & (2**64 - 1),
                                 spawn_key=(5, epoch))
    rng = np.random.Generator(np.random.Philox(seq))
    z = rng.standard_normal(batch.x0.shape)
    m_t, sig_sq = ou_coeffs(batch.t)
    x_t = m_t * batch.x0 + math.sqrt(sig_sq) * z
    return DataBatch(rows=x_t, seed=batch.seed, provenance="ou_pair",
                     t=batch.t, x0=batch.x0, z=z)


def train_erm(config: TrainConfig, data: DataBatch, oracle_ctx=None,
              init_model: Optional[ScoreModel] = None) -> tuple[ScoreModel, TrainHistory]:
    """Minibatch Adam on the empirical risk; returns the best-seen snapshot.

    The snapshot with the lowest full-batch risk on the provided data wins.
    With ``oracle_ctx`` given, the squared score error on a fixed probe set
    is logged per epoch.  ``init_model`` overrides the default initialization
    (useful for restricted families, e.g. frozen zero weights).
    """
    if config.method == "ism" and data.provenance != "noisy":
        raise DomainError("implicit training needs a noisy marginal batch")
    if config.method == "dsm":
        if data.provenance != "ou_pair":
            raise DomainError("denoising training needs an OU pair batch")
        if data.t != config.t:
            raise DomainError(f"data time {data.t} != config time {config.t}")

    if init_model is not None:
        if init_model.variant != config.method:
            raise DomainError("init_model variant must match the method")
        model = init_model.copy()
        net = model.net
    else:
        net = init_params(config.arch, config.seed)
        if config.method == "ism":
            model = ScoreModel("ism", net, a_raw=0.0, sigma_min=config.sigma_min)
        else:
            model = ScoreModel("dsm", net, sigma_tilde_raw=0.0, t=config.t)
    if config.monitors is not None:
        model.monitors = dict(config.monitors)

    if config.grad_check:
        sub = _subset_batch(data, min(8, data.n))
        err = gradient_check(model, sub, config.method)
        if err > 1e-3:
            raise DomainError(f"gradient check failed at initialization: {err:.3g}")

    history = TrainHistory()
    best_risk = empirical_risk(model, data, config.method).value
    best = model.copy()
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(config.seed) & (2**64 - 1),
                               spawn_key=(6,))))
    shapes = [A.shape for A in net.weights] + [b.shape for b in net.biases] + [()]
    adam = _Adam(shapes, config.step_size, config.beta1, config.beta2,
                 config.adam_eps)

    probe = None
    if oracle_ctx is not None:
        probe = sample_marginal(oracle_ctx, 512, seed=config.seed)
        probe_true = true_score(oracle_ctx, probe)

    n = data.n
    bs = min(config.batch_size, n)
    for epoch in range(config.epochs):
        epoch_data = data
        if config.method == "dsm":
            epoch_data = _fresh_dsm_batch(data, epoch)
        order = rng.permutation(n)
        last_grad = None
        if config.lr_schedule == "cosine":
            lr_scale = 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        else:
            lr_scale = 1.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            mini = _index_batch(epoch_data, idx)
            if config.method == "ism":
                _, grad = _ism_grad(model, mini.rows)
                pen, pgrad = _penalty_grad(model, mini.rows, config.penalty_weight)
            else:
                _, grad = _dsm_grad(model, mini.x0, mini.z)
                pen, pgrad = _penalty_grad(model, mini.rows, config.penalty_weight)
            if pgrad is not None:
                for i in range(len(grad.weights)):
                    grad.weights[i] += pgrad.weights[i]
                    grad.biases[i] += pgrad.biases[i]
            _apply_update(model, adam, grad, config.trainable, lr_scale)
            last_grad = grad
        risk, c0_hat, c1_hat = _epoch_stats(model, data, config.method)
        if not np.isfinite(risk) or risk > 1e12:
            raise TrainingDiverged(f"risk diverged at epoch {epoch}: {risk}",
                                   history)
        history.risk.append(risk)
        history.grad_norm.append(last_grad.norm() if last_grad else 0.0)
        history.scalar.append(model.a if config.method == "ism"
                              else model.sigma_tilde)
        history.monitor_c0.append(c0_hat)
        history.monitor_c1.append(c1_hat)
        if probe is not None:
            err = float(np.mean(np.sum((model.score(probe) - probe_true) ** 2,
                                       axis=1)))
            history.oracle_error.append(err)
        if risk < best_risk:
            best_risk = risk
            best = model.copy()
    return best, history


def _apply_update(model: ScoreModel, adam: _Adam, grad: ParamGradient,
                  trainable, lr_scale: float = 1.0) -> None:
    nw = len(model.net.weights)
    grads = list(grad.weights) + list(grad.biases) + [np.array(grad.scalar)]
    if "weights" not in trainable:
        for i in range(nw):
            grads[i] = np.zeros_like(grads[i])
    if "biases" not in trainable:
        for i in range(nw, 2 * nw):
            grads[i] = np.zeros_like(grads[i])
    if "scalar" not in trainable:
        grads[-1] = np.array(0.0)
    steps = adam.update(grads, lr_scale)
    for i in range(nw):
        model.net.weights[i] += steps[i]
        model.net.biases[i] += steps[nw + i]
    if model.variant == "ism":
        model.a_raw += float(steps[-1])
    else:
        model.sigma_tilde_raw += float(steps[-1])


def _index_batch(batch: DataBatch, idx) -> DataBatch:
    if batch.provenance == "ou_pair":
        return DataBatch(rows=batch.rows[idx], seed=batch.seed,
                         provenance="ou_pair", t=batch.t,
                         x0=batch.x0[idx], z=batch.z[idx])
    return DataBatch(rows=batch.rows[idx], seed=batch.seed,
                     provenance=batch.provenance)


def _subset_batch(batch: DataBatch, n: int) -> DataBatch:
    return _index_batch(batch, np.arange(n))
