"""vloglog command line: gen-trace, sketch, estimate, evaluate, sweep-theta, fit-xi.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .mle import DEFAULT_NMAX, empirical_noise_cdf
from .sketch import (
    IncompatiblePoolError,
    RegisterArray,
    RegisterPool,
    SnapshotFormatError,
    flow_histograms,
    read_pool,
    save_pool,
    sketch_packets,
    sketch_pairs,
)
from .theta import OutOfFitRangeError, estimate_total, estimate_total_grand_flow
from .hashing import HashConfig
from .workload import TraceParseError, ZipfModel, generate_trace, read_trace, save_trace, true_cardinalities_array


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return value
    return parse


def _add_pool_flags(p):
    p.add_argument("--m", type=_positive(int), default=200_000, help="pool size")
    p.add_argument("--k", type=_positive(int), default=512, help="virtual array size (power of two)")
    p.add_argument("--register-width", type=int, default=5)
    p.add_argument("--element-seed", type=int, default=0)
    p.add_argument("--flow-seed", type=int, default=1)


def _add_estimator_flags(p):
    p.add_argument("--estimator", choices=ev.ESTIMATORS, default="vll-theta")
    p.add_argument("--theta", type=float, default=-1.0)
    p.add_argument("--nmax", type=_positive(int), default=DEFAULT_NMAX)
    p.add_argument("--calibration", choices=("practical", "fitted"), default="practical")
    p.add_argument("--total-method", choices=("pool", "grand-flow"), default="pool")
    p.add_argument("--aux-k", type=_positive(int), default=1024)


def _add_workload_flags(p):
    p.add_argument("--flows", type=_positive(int), default=1_000_000)
    p.add_argument("--pi", type=_positive(float), default=2.25)
    p.add_argument("--card-max", type=_positive(int), default=100_000)


def _add_experiment_flags(p):
    _add_workload_flags(p)
    _add_pool_flags(p)
    p.add_argument("--trials", type=_positive(int), default=5)
    p.add_argument("--seed", type=int, default=1, help="trace seed of trial 0")
    p.add_argument("--traces", nargs="*", default=(), help="use these trace files instead of generating")
    p.add_argument("--parallel", type=_positive(int), default=ev.default_parallelism())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vloglog", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="write a synthetic Zipf trace")
    _add_workload_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sketch", help="sketch a trace into a pool snapshot")
    p.add_argument("--trace", required=True)
    _add_pool_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("estimate", help="per-flow estimates from a pool snapshot")
    p.add_argument("--pool", required=True)
    p.add_argument("--flows-from", required=True, help="trace file listing the flows to estimate")
    _add_estimator_flags(p)
    p.add_argument("--out", required=True, help="CSV of flow_id, truth, estimate, clamped")
    p.add_argument("--noise-out", help="also dump the empirical noise CDF as CSV")

    p = sub.add_parser("evaluate", help="score estimates or run a full experiment")
    p.add_argument("--estimates", help="CSV with truth and estimate columns (skips the experiment)")
    _add_experiment_flags(p)
    _add_estimator_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--prefix", default="evaluate")

    p = sub.add_parser("sweep-theta", help="mean WSE of vLL_theta over a theta grid")
    _add_experiment_flags(p)
    p.add_argument("--total-method", choices=("pool", "grand-flow"), default="pool")
    p.add_argument("--aux-k", type=_positive(int), default=1024)
    p.add_argument("--grid", type=float, nargs="+", default=list(ev.DEFAULT_THETA_GRID))
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-xi", help="empirical xi_theta of single-flow LL_theta")
    p.add_argument("--n", type=_positive(int), default=100_000)
    p.add_argument("--k", type=_positive(int), default=512)
    p.add_argument("--thetas", type=float, nargs="+", default=[-3.0, -2.0, -1.0, 0.0, 1.0])
    p.add_argument("--trials", type=_positive(int), default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _experiment_config(args) -> ev.ExperimentConfig:
    cfg = ev.ExperimentConfig(
        flows=args.flows, pi=args.pi, card_max=args.card_max, m=args.m, k=args.k,
        register_width=args.register_width, trials=len(args.traces) or args.trials, seed=args.seed,
        element_seed=args.element_seed, flow_seed=args.flow_seed,
        estimator=getattr(args, "estimator", "vll-theta"), theta=getattr(args, "theta", -1.0),
        n_max=getattr(args, "nmax", DEFAULT_NMAX), calibration=getattr(args, "calibration", "practical"),
        total_method=args.total_method, aux_k=args.aux_k, traces=tuple(args.traces),
        parallel=args.parallel)
    try:
        cfg.validate()
    except ev.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def cmd_gen_trace(args) -> None:
    trace = generate_trace(args.flows, ZipfModel(args.pi, args.card_max), args.seed)
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} packets of {args.flows} flows to {args.out}")


def _check_pool_flags(args) -> None:
    if args.k & (args.k - 1):
        raise UsageError(f"--k must be a power of two, got {args.k}")
    if args.m <= args.k:
        raise UsageError(f"--m must exceed --k, got m={args.m}, k={args.k}")
    if not 4 <= args.register_width <= 8:
        raise UsageError(f"--register-width must be in [4, 8], got {args.register_width}")


def cmd_sketch(args) -> None:
    _check_pool_flags(args)
    trace = read_trace(args.trace)
    pool = RegisterPool.empty(args.m, args.k, args.register_width, args.element_seed, args.flow_seed)
    sketch_packets(pool, trace.flows, trace.elements)
    save_pool(pool, args.out)
    print(f"sketched {len(trace)} packets into {args.out}")


def cmd_estimate(args) -> None:
    if not -3.0 <= args.theta <= 1.0:
        raise UsageError(f"--theta must be in [-3, 1], got {args.theta}")
    if args.calibration == "fitted":
        raise UsageError("--calibration fitted needs ground truth; use evaluate")
    pool = read_pool(args.pool)
    trace = read_trace(args.flows_from)
    ids, truths = true_cardinalities_array(trace.flows, trace.elements)
    if args.total_method == "pool":
        total = estimate_total(pool)
    else:
        aux = RegisterArray(args.aux_k, pool.register_width)
        cfg = HashConfig(pool.hash_cfg.element_seed, pool.hash_cfg.flow_seed,
                         prefix_bits=args.aux_k.bit_length() - 1)
        total = estimate_total_grand_flow(sketch_pairs(aux, trace.flows, trace.elements, cfg))
    trial = ev.TrialData(ids, truths, flow_histograms(pool, ids), total,
                         empirical_noise_cdf(pool), pool.m, pool.k)
    est = ev.estimate_flows(trial, args.estimator, args.theta, args.nmax)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["flow_id", "truth", "estimate", "clamped"])
        w.writerows(zip(ids.tolist(), truths.tolist(), map(repr, est.tolist()),
                        (est <= 1.0).astype(int).tolist()))
    if args.noise_out:
        with open(args.noise_out, "w", newline="") as fh:
            trial.noise.to_csv(fh)
    print(f"estimated {ids.size} flows (total estimate {total.n_hat_T:.1f}) into {args.out}")


def _read_estimates(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or not {"truth", "estimate"} <= set(rows[0]):
        raise ValueError(f"{path}: needs 'truth' and 'estimate' columns")
    return (np.array([float(r["truth"]) for r in rows]),
            np.array([float(r["estimate"]) for r in rows]))


def cmd_evaluate(args) -> None:
    out = Path(args.out_dir)
    if args.estimates:
        truth, est = _read_estimates(args.estimates)
        value = ev.wse(truth, est, ev.weights(truth, args.pi))
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{args.prefix}_scalars.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            w.writerow(["wse", repr(value)])
            w.writerow(["clamped_flows", int((est <= 1.0).sum())])
        with open(out / f"{args.prefix}_bins.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "bias", "stderr", "count"])
            for b in ev.binned_error_report(truth, est):
                w.writerow([b.lo, b.hi, repr(b.bias), repr(b.stderr), b.count])
        print(f"wse {value!r}")
        return
    report = ev.run_experiment(_experiment_config(args))
    report.write_csv(out, args.prefix)
    print(f"wse {report.wse!r}")


def cmd_sweep_theta(args) -> None:
    for theta in args.grid:
        if not -3.0 <= theta <= 1.0:
            raise UsageError(f"--grid values must be in [-3, 1], got {theta}")
    cfg = _experiment_config(args)
    trials = ev.load_trials(cfg)
    rows = ev.theta_sweep(trials, args.grid, cfg.pi)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "mean_wse", "std_wse"] + [f"wse_trial_{i}" for i in range(len(trials))])
        for r in rows:
            w.writerow([r.theta, repr(r.mean_wse), repr(r.std_wse)] + [repr(v) for v in r.per_trial])
    best = min(rows, key=lambda r: r.mean_wse)
    print(f"argmin theta {best.theta}")


def cmd_fit_xi(args) -> None:
    if args.k & (args.k - 1):
        raise UsageError(f"--k must be a power of two, got {args.k}")
    for theta in args.thetas:
        if not -3.0 <= theta <= 1.0:
            raise UsageError(f"--thetas values must be in [-3, 1], got {theta}")
    rows, (intercept, slope) = ev.fit_xi(args.n, args.k, args.thetas, args.trials, args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta", "xi_hat", "xi_fit", "sd", "trials"])
        for r in rows:
            w.writerow([r.theta, repr(r.xi_hat), repr(r.xi_fit), repr(r.sd), r.trials])
    print(f"xi_theta ~ {intercept:.4f} + {slope:.4f} * theta")


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "sketch": cmd_sketch,
    "estimate": cmd_estimate,
    "evaluate": cmd_evaluate,
    "sweep-theta": cmd_sweep_theta,
    "fit-xi": cmd_fit_xi,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"vloglog {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (TraceParseError, SnapshotFormatError, IncompatiblePoolError, OutOfFitRangeError,
            ev.ConfigError, OSError, ValueError) as exc:
        print(f"vloglog {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
