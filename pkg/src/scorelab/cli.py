"""Command-line front end.

Subcommands: generate, oracle, train, eval, sweep, rates, verify <suite>.
Exit codes: 0 success, 1 verification/gate failure, 2 usage error.
Default worker count comes from the SCORELAB_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .evaluation import jacobian_error, score_error
from .experiment import (VERIFY_SUITES, ExperimentConfig, emit_plotdata,
                         rate_report, read_records, run_sweep, run_verify,
                         verify_gn)
from .generators import DomainError, sample_noisy, sample_ou_pair
from .nets import ScoreModel
from .oracle import make_context, true_score, true_score_jacobian
from .training import TrainConfig, train_erm

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _default_threads() -> int:
    return int(os.environ.get("SCORELAB_THREADS", "1"))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorelab",
                                description="score and score-Jacobian estimation lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a data batch to CSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1024)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ou", action="store_true",
                   help="sample the OU marginal at the config's time t")

    o = sub.add_parser("oracle", help="evaluate the exact score at given points")
    o.add_argument("--config", required=True)
    o.add_argument("--points", required=True, help="CSV of points, header x0..")
    o.add_argument("--out", required=True)
    o.add_argument("--time-t", action="store_true",
                   help="use the time-t oracle at the config's t")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint JSON path")
    t.add_argument("--log", default=None, help="per-epoch history CSV")
    t.add_argument("--n", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--method", choices=("ism", "dsm"), default=None)

    e = sub.add_parser("eval", help="score a checkpoint against the oracle")
    e.add_argument("--config", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", default=None, help="JSON output path (default stdout)")

    s = sub.add_parser("sweep", help="run the (n, seed) training sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="records CSV path")
    s.add_argument("--threads", type=int, default=None)

    r = sub.add_parser("rates", help="fit convergence slopes from a sweep CSV")
    r.add_argument("--config", required=True)
    r.add_argument("--records", required=True)
    r.add_argument("--out", default=None)
    r.add_argument("--plot", default=None, help="also emit rate-curve plot data")

    v = sub.add_parser("verify", help="run a named invariant suite")
    v.add_argument("suite", choices=VERIFY_SUITES)
    v.add_argument("--trials", type=int, default=None)
    v.add_argument("--dim", type=int, default=None)
    v.add_argument("--degree", type=int, default=None)
    v.add_argument("--alpha", type=int, default=None)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--out", default=None, help="CSV of per-trial results (gn only)")
    v.add_argument("--corrupt", action="store_true",
                   help="negative-control fixture: inject a known corruption")
    return p


def _cmd_generate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.ou:
        batch = sample_ou_pair(cfg.generator, cfg.noise, cfg.t, args.n, args.seed)
    else:
        batch = sample_noisy(cfg.generator, cfg.noise, args.n, args.seed)
    batch.to_csv(args.out)
    print(f"wrote {batch.n} x {batch.dim} samples to {args.out}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    ctx = make_context(cfg.generator, cfg.noise,
                       t=cfg.t if args.time_t else None)
    pts = np.loadtxt(args.points, delimiter=",", skiprows=1, ndmin=2)
    s = true_score(ctx, pts)
    jac = true_score_jacobian(ctx, pts).reshape(len(pts), -1)
    D = cfg.generator.D
    header = ",".join([f"s{i}" for i in range(D)]
                      + [f"j{i}{j}" for i in range(D) for j in range(D)])
    np.savetxt(args.out, np.hstack([s, jac]), delimiter=",", header=header,
               comments="")
    print(f"wrote oracle values for {len(pts)} points to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    method = args.method or (cfg.methods[0])
    n = args.n or max(cfg.n_values)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    tc = TrainConfig(method=method, t=cfg.t if method == "dsm" else None,
                     arch=cfg.arch, sigma_min=cfg.noise.sigma_min,
                     seed=seed, **cfg.train)
    if method == "ism":
        data = sample_noisy(cfg.generator, cfg.noise, n, seed)
    else:
        data = sample_ou_pair(cfg.generator, cfg.noise, cfg.t, n, seed)
    model, history = train_erm(tc, data)
    model.save(args.out)
    if args.log:
        with open(args.log, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "risk", "grad_norm", "scalar",
                        "monitor_c0", "monitor_c1"])
            for i in range(history.epoch_count()):
                w.writerow([i, repr(history.risk[i]), repr(history.grad_norm[i]),
                            repr(history.scalar[i]), repr(history.monitor_c0[i]),
                            repr(history.monitor_c1[i])])
    final = history.risk[-1] if history.risk else float("nan")
    print(f"trained {method} on n={n}, final risk {final:.6g}; "
          f"checkpoint at {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    model = ScoreModel.load(args.model)
    ctx = make_context(cfg.generator, cfg.noise,
                       t=model.t if model.variant == "dsm" else None)
    s_err = score_error(model, ctx, cfg.eval_n_mc, cfg.eval_seed)
    j_err = jacobian_error(model, ctx, cfg.eval_n_mc, cfg.eval_seed)
    out = {"score_error": s_err.mean, "score_se": s_err.se,
           "jacobian_error": j_err.mean, "jacobian_se": j_err.se,
           "n_mc": cfg.eval_n_mc, "seed": cfg.eval_seed}
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    threads = args.threads if args.threads is not None else _default_threads()
    records = run_sweep(cfg, out_csv=args.out, threads=threads,
                        progress=lambda r: print(
                            f"  {r.method} n={r.n} seed={r.seed}: "
                            f"score_error={r.score_error:.4g} [{r.status}]"))
    failed = [r for r in records if r.status != "ok"]
    print(f"sweep done: {len(records)} runs, {len(failed)} failed; "
          f"records at {args.out}")
    return EXIT_OK


def _cmd_rates(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    records = read_records(args.records)
    reports = [rate_report(records, beta=cfg.generator.beta, d=cfg.generator.d,
                           method=m) for m in cfg.methods]
    out = {rep["method"]: rep for rep in reports}
    text = json.dumps(out, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if args.plot:
        emit_plotdata(records, "rate_curve", args.plot)
    return EXIT_OK if all(rep["pass"] for rep in reports) else EXIT_FAIL


def _cmd_verify(args) -> int:
    if args.suite == "gn" and args.out:
        ok, lines, rows = verify_gn(trials=args.trials or 200, dim=args.dim,
                                    degree=args.degree, alpha=args.alpha,
                                    seed=args.seed or 0)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "lhs", "rhs", "margin"])
            for r in rows:
                w.writerow([r["trial"], repr(r["lhs"]), repr(r["rhs"]),
                            repr(r["margin"])])
    else:
        ok, lines = run_verify(args.suite, trials=args.trials, dim=args.dim,
                               degree=args.degree, alpha=args.alpha,
                               seed=args.seed, corrupt=args.corrupt)
    for line in lines:
        print(line)
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"generate": _cmd_generate, "oracle": _cmd_oracle,
                "train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep,
                "rates": _cmd_rates, "verify": _cmd_verify}
    try:
        return handlers[args.command](args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
