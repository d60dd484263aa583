"""Experiment orchestration: configs, sweeps over (n, seed), and verify suites.

A sweep trains one model per (method, n, seed) cell, scores it against the
oracle, and appends one CSV row per run.  Runs are independent and seeded, so
results are identical at any worker count; rows are flushed to a journal as
they finish and the final CSV is written sorted via an atomic rename.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .generators import (DomainError, GeneratorSpec, NoiseConfig, circle_generator,
                         make_affine, make_constant, sample_noisy, sample_ou_pair)
from .oracle import make_context, quadrature_convergence
from .evaluation import fit_rate, jacobian_error, score_error
from .nets import ScoreModel, sobolev_monitor
from .objectives import dsm_identity_check, empirical_risk, ism_identity_check
from .training import TrainConfig, TrainingDiverged, train_erm

LN2 = math.log(2.0)
_CONFIG_KEYS = {"generator", "noise", "method", "t", "arch", "train", "eval",
                "sweep", "output_dir"}
_TRAIN_KEYS = {"step_size", "beta1", "beta2", "adam_eps", "epochs",
               "batch_size", "penalty_weight", "monitors", "lr_schedule",
               "grad_check", "step_budget"}
_EVAL_KEYS = {"n_mc", "seed"}
_SWEEP_KEYS = {"n_values", "seeds"}


@dataclass
class ExperimentConfig:
    generator: GeneratorSpec
    noise: NoiseConfig
    method: str = "ism"                    # "ism" | "dsm" | "both"
    t: float = LN2
    arch: tuple = (4, 48, 4)
    train: dict = None
    eval_n_mc: int = 4096
    eval_seed: int = 90_210
    n_values: tuple = (256, 512, 1024, 2048, 4096, 8192)
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "out"

    def __post_init__(self):
        if self.method not in ("ism", "dsm", "both"):
            raise DomainError(f"method must be ism, dsm or both, got {self.method!r}")
        self.train = dict(self.train or {})
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise DomainError(f"unknown train keys: {sorted(unknown)}")
        self.arch = tuple(int(w) for w in self.arch)
        self.n_values = tuple(int(n) for n in self.n_values)
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def methods(self) -> tuple:
        return ("ism", "dsm") if self.method == "both" else (self.method,)

    def to_json_dict(self) -> dict:
        return {"generator": self.generator.to_json_dict(),
                "noise": self.noise.to_json_dict(),
                "method": self.method, "t": self.t, "arch": list(self.arch),
                "train": dict(self.train),
                "eval": {"n_mc": self.eval_n_mc, "seed": self.eval_seed},
                "sweep": {"n_values": list(self.n_values),
                          "seeds": list(self.seeds)},
                "output_dir": self.output_dir}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - _CONFIG_KEYS
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        for section, keys in (("eval", _EVAL_KEYS), ("sweep", _SWEEP_KEYS)):
            extra = set(obj.get(section, {})) - keys
            if extra:
                raise DomainError(f"unknown {section} keys: {sorted(extra)}")
        ev = obj.get("eval", {})
        sw = obj.get("sweep", {})
        return cls(generator=GeneratorSpec.from_json_dict(obj["generator"]),
                   noise=NoiseConfig.from_json_dict(obj["noise"]),
                   method=obj.get("method", "ism"),
                   t=float(obj.get("t", LN2)),
                   arch=tuple(obj.get("arch", (4, 48, 4))),
                   train=obj.get("train", {}),
                   eval_n_mc=int(ev.get("n_mc", 4096)),
                   eval_seed=int(ev.get("seed", 90_210)),
                   n_values=tuple(sw.get("n_values", (256, 512, 1024, 2048,
                                                      4096, 8192))),
                   seeds=tuple(sw.get("seeds", (0, 1, 2, 3, 4))),
                   output_dir=obj.get("output_dir", "out"))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)


RECORD_FIELDS = ("run_id", "method", "n", "seed", "score_error", "score_se",
                 "jacobian_error", "jacobian_se", "final_risk", "c0_hat",
                 "c1_hat", "calpha_hat", "s_effective", "b_effective",
                 "wall_ms", "status")


@dataclass
class RunRecord:
    run_id: str
    method: str
    n: int
    seed: int
    score_error: float = float("nan")
    score_se: float = float("nan")
    jacobian_error: float = float("nan")
    jacobian_se: float = float("nan")
    final_risk: float = float("nan")
    c0_hat: float = float("nan")
    c1_hat: float = float("nan")
    calpha_hat: float = float("nan")
    s_effective: int = 0
    b_effective: float = float("nan")
    wall_ms: float = 0.0
    status: str = "ok"

    def to_row(self) -> list:
        return [_fmt(getattr(self, f)) for f in RECORD_FIELDS]

    @classmethod
    def from_row(cls, row: dict) -> "RunRecord":
        missing = set(RECORD_FIELDS) - set(row)
        if missing:
            raise DomainError(f"record row missing fields: {sorted(missing)}")
        kw = dict(row)
        for f in ("score_error", "score_se", "jacobian_error", "jacobian_se",
                  "final_risk", "c0_hat", "c1_hat", "calpha_hat",
                  "b_effective", "wall_ms"):
            kw[f] = float(kw[f])
        kw["n"] = int(kw["n"])
        kw["seed"] = int(kw["seed"])
        kw["s_effective"] = int(kw["s_effective"])
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_id_for(config: ExperimentConfig, method: str, n: int, seed: int) -> str:
    payload = json.dumps([config.to_json_dict(), method, n, seed],
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def run_single(config: ExperimentConfig, method: str, n: int, seed: int) -> RunRecord:
    """Sample -> train -> evaluate one cell; failures land in the status column."""
    rid = run_id_for(config, method, n, seed)
    rec = RunRecord(run_id=rid, method=method, n=n, seed=seed)
    start = time.perf_counter()
    try:
        train_kw = dict(config.train)
        budget = train_kw.pop("step_budget", None)
        if budget is not None:
            # floor the optimizer step count across n; with "epochs" also set,
            # large n keeps the per-epoch scaling (steps grow with n)
            bs = min(train_kw.get("batch_size", 256), n)
            budget_epochs = max(1, round(budget / math.ceil(n / bs)))
            train_kw["epochs"] = max(train_kw.get("epochs", 0), budget_epochs)
        tc = TrainConfig(method=method,
                         t=config.t if method == "dsm" else None,
                         arch=config.arch,
                         sigma_min=config.noise.sigma_min,
                         seed=seed, **train_kw)
        if method == "ism":
            data = sample_noisy(config.generator, config.noise, n, seed)
            ctx = make_context(config.generator, config.noise)
        else:
            data = sample_ou_pair(config.generator, config.noise, config.t, n, seed)
            ctx = make_context(config.generator, config.noise, t=config.t)
        model, history = train_erm(tc, data)
        s_err = score_error(model, ctx, config.eval_n_mc, config.eval_seed)
        j_err = jacobian_error(model, ctx, config.eval_n_mc, config.eval_seed)
        probe = data.rows[:min(256, n)]
        mon = sobolev_monitor(model, probe, alpha=2)
        rec.score_error, rec.score_se = s_err.mean, s_err.se
        rec.jacobian_error, rec.jacobian_se = j_err.mean, j_err.se
        rec.final_risk = empirical_risk(model, data, method).value
        rec.c0_hat = mon["C0_hat"]
        rec.c1_hat = mon["C1_hat"]
        rec.calpha_hat = mon["Calpha_hat"]
        rec.s_effective = model.net.s_effective()
        rec.b_effective = model.net.b_effective()
    except TrainingDiverged as exc:
        rec.status = f"diverged: {exc}"
    except Exception as exc:  # noqa: BLE001 - sweep must survive bad cells
        rec.status = f"error: {exc}"
    rec.wall_ms = (time.perf_counter() - start) * 1000.0
    return rec


def _worker(args) -> RunRecord:
    config_dict, method, n, seed = args
    return run_single(ExperimentConfig.from_json_dict(config_dict), method, n, seed)


def run_sweep(config: ExperimentConfig, out_csv=None, threads: int = 1,
              progress=None) -> list:
    """All (method, n, seed) cells; deterministic output at any worker count."""
    cells = [(config.to_json_dict(), m, n, s)
             for m in config.methods for n in config.n_values
             for s in config.seeds]
    records = []
    journal = f"{out_csv}.partial" if out_csv else None
    if journal:
        with open(journal, "w", newline="") as fh:
            csv.writer(fh).writerow(RECORD_FIELDS)

    def note(rec):
        records.append(rec)
        if journal:
            with open(journal, "a", newline="") as fh:
                csv.writer(fh).writerow(rec.to_row())
        if progress:
            progress(rec)

    if threads > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rec in pool.map(_worker, cells):
                note(rec)
    else:
        for cell in cells:
            note(_worker(cell))

    records.sort(key=lambda r: (r.method, r.n, r.seed))
    if out_csv:
        write_records(records, out_csv)
        os.remove(journal)
    return records


def write_records(records, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for rec in records:
            w.writerow(rec.to_row())
    os.replace(tmp, path)


def read_records(path) -> list:
    with open(path, newline="") as fh:
        return [RunRecord.from_row(row) for row in csv.DictReader(fh)]


def medians_by_n(records, method: str, attr: str = "score_error") -> list:
    """(n, median, q25, q75) over seeds for one method, skipping failed runs."""
    by_n = {}
    for r in records:
        if r.method == method and r.status == "ok":
            by_n.setdefault(r.n, []).append(getattr(r, attr))
    out = []
    for n in sorted(by_n):
        vals = np.asarray(by_n[n])
        out.append((n, float(np.median(vals)),
                    float(np.quantile(vals, 0.25)),
                    float(np.quantile(vals, 0.75))))
    return out


def rate_report(records, beta: float, d: int, method: str) -> dict:
    """Slope-band verdict for one method's median error curves.

    Pass rule: fitted score slope <= half the target exponent (upper bounds
    permit faster decay), r^2 >= 0.8, and a negative Jacobian slope.
    """
    med = medians_by_n(records, method)
    fit = fit_rate([(n, m) for n, m, _, _ in med], beta=beta, d=d)
    med_j = medians_by_n(records, method, "jacobian_error")
    fit_j = fit_rate([(n, m) for n, m, _, _ in med_j], beta=beta, d=d)
    score_pass = (fit.slope <= 0.5 * fit.target_slope) and (fit.r2 >= 0.8)
    return {"method": method,
            "slope": fit.slope, "r2": fit.r2, "target": fit.target_slope,
            "jacobian_slope": fit_j.slope,
            "pass": bool(score_pass and fit_j.slope < 0.0)}


def emit_plotdata(records, kind: str, out_path) -> None:
    """Aggregate rows for plotting; data only, no rendering."""
    if not records:
        raise DomainError("no records to plot")
    if kind == "rate_curve":
        methods = sorted({r.method for r in records})
        with open(f"{out_path}.tmp", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "n", "median_error", "q25", "q75",
                        "fit_slope", "fit_intercept"])
            for m in methods:
                med = medians_by_n(records, m)
                fit = fit_rate([(n, v) for n, v, _, _ in med])
                for n, v, q25, q75 in med:
                    w.writerow([m, n, _fmt(v), _fmt(q25), _fmt(q75),
                                _fmt(fit.slope), _fmt(fit.intercept)])
        os.replace(f"{out_path}.tmp", out_path)
    elif kind == "training_curve":
        with open(f"{out_path}.tmp", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "risk", "grad_norm", "scalar"])
            for i, row in enumerate(records):
                w.writerow([i] + [_fmt(float(v)) for v in row])
        os.replace(f"{out_path}.tmp", out_path)
    else:
        raise DomainError(f"unknown plot kind {kind!r}")


# -- verification suites ------------------------------------------------------

def _builtin_trio():
    noise = NoiseConfig(sigma=0.4, sigma_min=0.3)
    return [("constant", make_constant([0.3, -0.2]), noise),
            ("affine", make_affine([[0.5], [-0.3]], [0.2, 0.1]), noise),
            ("circle", circle_generator(D=2, radius=0.5), noise)]


def verify_gelu(points: int = 1_000_000) -> tuple[bool, list]:
    from .nets import gelu_prime, gelu_second
    x = np.linspace(-20.0, 20.0, points)
    m1 = float(np.abs(gelu_prime(x)).max())
    m2 = float(np.abs(gelu_second(x)).max())
    ok = m1 <= 2.0 and m2 <= 2.0
    lines = [f"{'PASS' if ok else 'FAIL'} activation derivative bounds: "
             f"max|g'|={m1:.6f}, max|g''|={m2:.6f} (limit 2)"]
    return ok, lines


def verify_gn(trials: int = 200, dim=None, degree=None, alpha=None,
              seed: int = 0, decay: float = 0.6) -> tuple[bool, list, list]:
    """Exact Gaussian-weight inequality sweep; returns (ok, lines, csv_rows)."""
    from .hermite import random_series, verify_gn_gaussian
    rows = []
    violations = 0
    rng = np.random.Generator(np.random.Philox(seed))
    for trial in range(trials):
        dim_t = dim or int(rng.integers(1, 4))
        deg_t = degree or int(rng.integers(1, 9))
        alpha_t = alpha or int(rng.integers(2, 4))
        s = random_series(dim_t, deg_t, decay, seed=seed * 1_000_003 + trial)
        res = verify_gn_gaussian(s, alpha_t)
        margin = min(res["rhs_div"] - res["lhs_div"],
                     res["rhs_jac"] - res["lhs_jac"])
        rows.append({"trial": trial, "lhs": res["lhs_div"],
                     "rhs": res["rhs_div"], "margin": margin})
        if not res["holds"]:
            violations += 1
    ok = violations == 0
    lines = [f"{'PASS' if ok else 'FAIL'} gaussian interpolation inequalities: "
             f"{violations} violations in {trials} trials"]
    return ok, lines, rows


def verify_identities(n_mc: int = 20_000, models: int = 5, seed: int = 0,
                      corrupt: bool = False) -> tuple[bool, list, list]:
    """Loss-vs-Fisher identity audit; --corrupt negates divergences (fixture)."""
    from .training import init_params
    rows, ok = [], True
    for name, gen, noise in _builtin_trio():
        ctx0 = make_context(gen, noise)
        ctx_t = make_context(gen, noise, t=LN2)
        for k in range(models):
            net = init_params((gen.D, 8, gen.D), seed=seed * 7919 + k)
            ism = ScoreModel("ism", net, a_raw=0.3, sigma_min=noise.sigma_min)
            target = _NegatedDivergence(ism) if corrupt else ism
            res = ism_identity_check(target, ctx0, n_mc, seed=seed * 31 + k)
            rows.append({"method": "ism", "generator": name, **res})
            ok = ok and res["holds"]
            dsm = ScoreModel("dsm", net, sigma_tilde_raw=0.2, t=LN2)
            res = dsm_identity_check(dsm, ctx_t, n_mc, seed=seed * 31 + k,
                                     target_scale=1.2 if corrupt else 1.0)
            rows.append({"method": "dsm", "generator": name, **res})
            ok = ok and res["holds"]
    lines = [f"{'PASS' if r['holds'] else 'FAIL'} {r['method']} identity on "
             f"{r['generator']}: gap={r['gap']:.4g} se={r['se']:.4g}"
             for r in rows]
    return ok, lines, rows


class _NegatedDivergence:
    """Corrupted-build fixture: divergence sign flipped."""

    def __init__(self, model):
        self.model = model

    def score(self, y):
        return self.model.score(y)

    def score_divergence(self, y):
        return -self.model.score_divergence(y)

    def score_with_divergence(self, y):
        s, div = self.model.score_with_divergence(y)
        return s, -div


def verify_oracle(n_points: int = 200, seed: int = 3) -> tuple[bool, list]:
    from .oracle import (log_density, sample_marginal, true_score,
                         true_score_jacobian, check_derivative_bound)
    lines, ok = [], True
    for name, gen, noise in _builtin_trio():
        ctx = make_context(gen, noise)
        y = sample_marginal(ctx, min(n_points, 50), seed)
        # finite-difference gradient of the log density
        h = 1e-5
        grad_fd = np.zeros_like(y)
        for i in range(gen.D):
            e = np.zeros(gen.D)
            e[i] = h
            grad_fd[:, i] = (log_density(ctx, y + e) - log_density(ctx, y - e)) / (2 * h)
        g_err = float(np.abs(true_score(ctx, y) - grad_fd).max())
        # finite-difference Jacobian of the score
        h = 1e-4
        jac_fd = np.zeros((y.shape[0], gen.D, gen.D))
        for i in range(gen.D):
            e = np.zeros(gen.D)
            e[i] = h
            jac_fd[:, :, i] = (true_score(ctx, y + e) - true_score(ctx, y - e)) / (2 * h)
        j_err = float(np.abs(true_score_jacobian(ctx, y) - jac_fd).max())
        yy = sample_marginal(ctx, n_points, seed + 1)
        b1 = check_derivative_bound(ctx, yy, 1)
        b2 = check_derivative_bound(ctx, yy, 2)
        conv = quadrature_convergence(ctx)
        case_ok = (g_err < 1e-6 and j_err < 1e-5 and b1["holds"] and b2["holds"]
                   and conv < max(ctx.tol, 1e-8))
        ok = ok and case_ok
        lines.append(f"{'PASS' if case_ok else 'FAIL'} oracle on {name}: "
                     f"grad_fd={g_err:.2e} jac_fd={j_err:.2e} "
                     f"bounds=({b1['holds']},{b2['holds']}) quad={conv:.2e}")
    return ok, lines


def verify_gradients(seed: int = 11) -> tuple[bool, list]:
    from .training import gradient_check, init_params
    noise = NoiseConfig(sigma=0.4, sigma_min=0.3)
    gen = circle_generator(D=4, radius=0.5)
    lines, ok = [], True
    for method in ("ism", "dsm"):
        for arch in ((4, 6, 4), (4, 8, 6, 4)):
            net = init_params(arch, seed)
            if method == "ism":
                model = ScoreModel("ism", net, a_raw=0.2, sigma_min=0.3)
                batch = sample_noisy(gen, noise, 8, seed)
            else:
                model = ScoreModel("dsm", net, sigma_tilde_raw=-0.1, t=LN2)
                batch = sample_ou_pair(gen, noise, LN2, 8, seed)
            err = gradient_check(model, batch, method)
            case_ok = err < 1e-4
            ok = ok and case_ok
            lines.append(f"{'PASS' if case_ok else 'FAIL'} {method} gradient "
                         f"arch={arch}: max rel err {err:.2e}")
    return ok, lines


VERIFY_SUITES = ("gn", "gelu", "identities", "oracle", "gradients")


def run_verify(suite: str, **opts) -> tuple[bool, list]:
    """Dispatch one named invariant suite; returns (ok, report lines)."""
    if suite == "gelu":
        return verify_gelu()
    if suite == "gn":
        ok, lines, _ = verify_gn(trials=opts.get("trials") or 200,
                                 dim=opts.get("dim"), degree=opts.get("degree"),
                                 alpha=opts.get("alpha"),
                                 seed=opts.get("seed") or 0)
        return ok, lines
    if suite == "identities":
        ok, lines, _ = verify_identities(seed=opts.get("seed") or 0,
                                         corrupt=opts.get("corrupt", False))
        return ok, lines
    if suite == "oracle":
        return verify_oracle(seed=opts.get("seed") or 3)
    if suite == "gradients":
        return verify_gradients(seed=opts.get("seed") or 11)
    raise DomainError(f"unknown verify suite {suite!r}; "
                      f"choose from {VERIFY_SUITES}")
