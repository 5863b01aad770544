"""Accuracy metrics and experiment drivers.

Per-flow experiments follow one pipeline per trial: generate (or load) a
trace, sketch it into a pool, summarize every flow by the histogram of its
virtual register values, then hand the histograms to an estimator. Reports
hold per-flow (truth, estimate) rows, the weighted square error and error
curves binned by true cardinality.

Single-flow helpers at the bottom drive the LL_theta / MLE accuracy runs.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import hashing
from .hashing import HashConfig
from .mle import DEFAULT_NMAX, NoiseCdf, empirical_noise_cdf, mle_from_histograms
from .sketch import RegisterArray, RegisterPool, flow_histograms, registers_from_hashes, sketch_packets, sketch_pairs
from .theta import (
    ThetaConfig,
    TotalEstimate,
    estimate_total,
    estimate_total_grand_flow,
    fit_calibration,
    rough_estimates,
    vll_theta_from_histograms,
    xi_theta,
)
from .workload import Trace, ZipfModel, generate_trace, read_trace, true_cardinalities_array

ESTIMATORS = ("vll-theta", "mle")
DEFAULT_THETA_GRID = (-3.0, -2.5, -2.0, -1.5, -1.0, -0.5, 0.0)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def weight(n: float, pi: float) -> float:
    """w(n) = n**(pi - 1), the Zipf weight with the constant dropped."""
    if n < 1:
        raise ValueError(f"weight needs n >= 1, got {n}")
    return float(n) ** (pi - 1.0)


def weights(ns, pi: float) -> np.ndarray:
    ns = np.asarray(ns, dtype=np.float64)
    if np.any(ns < 1):
        raise ValueError("weight needs n >= 1")
    return ns ** (pi - 1.0)


def wse(truths, estimates, w) -> float:
    """Weighted square error sum (n_i - est_i)**2 * w_i."""
    n = np.asarray(truths, dtype=np.float64)
    e = np.asarray(estimates, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not n.shape == e.shape == w.shape:
        raise ValueError(f"length mismatch: {n.shape}, {e.shape}, {w.shape}")
    return float(np.sum((n - e) ** 2 * w))


@dataclass(frozen=True)
class Bin:
    lo: int
    hi: int
    bias: float
    stderr: float
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def bin_edges(max_card: int, start: int = 1000) -> list[int]:
    """1000-wide bins up to 10000, then 5000-wide, covering ``max_card``."""
    edges = [start]
    while edges[-1] < max_card:
        step = 1000 if edges[-1] < 10000 else 5000
        edges.append(edges[-1] + step)
    if len(edges) == 1:
        edges.append(start + 1000)
    return edges


def binned_error_report(truths, estimates, start: int = 1000) -> list[Bin]:
    """Relative bias mean(est/n) - 1 and relative std err std(est/n) per (lo, hi] bin."""
    n = np.asarray(truths, dtype=np.float64)
    e = np.asarray(estimates, dtype=np.float64)
    if n.size == 0:
        raise ValueError("no flows to bin")
    edges = bin_edges(int(n.max()), start)
    ratio = e / n
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (n > lo) & (n <= hi)
        c = int(sel.sum())
        if c:
            r = ratio[sel]
            out.append(Bin(lo, hi, float(r.mean() - 1.0), float(r.std()), c))
        else:
            out.append(Bin(lo, hi, math.nan, math.nan, 0))
    return out


# ---------------------------------------------------------------------------
# per-flow pipeline


@dataclass
class TrialData:
    """Everything the estimators need from one sketched trace."""

    flow_ids: np.ndarray
    truths: np.ndarray
    hist: np.ndarray
    total: TotalEstimate
    noise: NoiseCdf
    m: int
    k: int


def prepare_trial(trace: Trace, m: int, k: int, register_width: int = 5,
                  element_seed: int = 0, flow_seed: int = 1,
                  total_method: str = "pool", aux_k: int = 1024) -> TrialData:
    pool = RegisterPool.empty(m, k, register_width, element_seed, flow_seed)
    sketch_packets(pool, trace.flows, trace.elements)
    if total_method == "pool":
        total = estimate_total(pool)
    elif total_method == "grand-flow":
        aux = RegisterArray(aux_k, register_width)
        cfg = HashConfig(element_seed=element_seed, flow_seed=flow_seed,
                         prefix_bits=aux_k.bit_length() - 1)
        sketch_pairs(aux, trace.flows, trace.elements, cfg)
        total = estimate_total_grand_flow(aux)
    else:
        raise ConfigError(f"total_method: unknown method {total_method!r}")
    cards = trace.meta.get("cardinalities")
    if cards is not None:
        ids = np.arange(len(cards), dtype=np.uint64)
        truths = np.asarray(cards, dtype=np.int64)
    else:
        ids, truths = true_cardinalities_array(trace.flows, trace.elements)
    return TrialData(ids, truths, flow_histograms(pool, ids), total,
                     empirical_noise_cdf(pool), m, k)


def estimate_flows(trial: TrialData, estimator: str, theta: float = -1.0,
                   n_max: int = DEFAULT_NMAX, calibration: tuple[float, float] | None = None) -> np.ndarray:
    if estimator == "vll-theta":
        if calibration is None:
            cfg = ThetaConfig(theta)
        else:
            cfg = ThetaConfig(theta, alpha=calibration[0], beta=calibration[1])
        return vll_theta_from_histograms(trial.hist, trial.total, cfg, trial.m)
    if estimator == "mle":
        return mle_from_histograms(trial.hist, trial.noise, n_max).astype(np.float64)
    raise ConfigError(f"estimator: unknown estimator {estimator!r}")


def fit_trial_calibration(trial: TrialData, theta: float, pi: float) -> tuple[float, float]:
    rough = rough_estimates(trial.hist, theta)
    return fit_calibration(rough, trial.truths, weights(trial.truths, pi))


@dataclass
class SweepRow:
    theta: float
    mean_wse: float
    std_wse: float
    per_trial: list[float]


def theta_sweep(trials: Sequence[TrialData], grid: Sequence[float], pi: float) -> list[SweepRow]:
    """Mean and spread of WSE(vLL_theta) across trials for each theta."""
    for theta in grid:
        xi_theta(theta)
    rows = []
    for theta in grid:
        vals = [wse(t.truths, estimate_flows(t, "vll-theta", theta), weights(t.truths, pi))
                for t in trials]
        rows.append(SweepRow(float(theta), float(np.mean(vals)), float(np.std(vals)), vals))
    return rows


@dataclass
class ExperimentConfig:
    flows: int = 1_000_000
    pi: float = 2.25
    card_max: int = 100_000
    m: int = 200_000
    k: int = 512
    register_width: int = 5
    trials: int = 5
    seed: int = 1
    element_seed: int = 0
    flow_seed: int = 1
    estimator: str = "vll-theta"
    theta: float = -1.0
    n_max: int = DEFAULT_NMAX
    calibration: str = "practical"
    total_method: str = "pool"
    aux_k: int = 1024
    traces: tuple[str, ...] = ()
    parallel: int = 1

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if not self.traces and self.flows < 1:
            bad("flows", "must be >= 1")
        if not self.pi > 0:
            bad("pi", "must be > 0")
        if self.card_max < 1:
            bad("card_max", "must be >= 1")
        if self.k < 1 or self.k & (self.k - 1):
            bad("k", "must be a power of two")
        if self.m <= self.k:
            bad("m", "must exceed k")
        if not 4 <= self.register_width <= 8:
            bad("register_width", "must be in [4, 8]")
        if self.trials < 1:
            bad("trials", "must be >= 1")
        if self.estimator not in ESTIMATORS:
            bad("estimator", f"must be one of {ESTIMATORS}")
        if not -3.0 <= self.theta <= 1.0:
            bad("theta", "must be in [-3, 1]")
        if self.n_max < 1:
            bad("n_max", "must be >= 1")
        if self.calibration not in ("practical", "fitted"):
            bad("calibration", "must be 'practical' or 'fitted'")
        if self.total_method not in ("pool", "grand-flow"):
            bad("total_method", "must be 'pool' or 'grand-flow'")
        if self.aux_k < 1 or self.aux_k & (self.aux_k - 1):
            bad("aux_k", "must be a power of two")
        if self.parallel < 1:
            bad("parallel", "must be >= 1")

    def echo(self) -> dict:
        d = asdict(self)
        d["traces"] = ";".join(self.traces)
        d.pop("parallel")
        return d


@dataclass
class EvaluationReport:
    estimator: str
    trial: np.ndarray
    flow_id: np.ndarray
    truth: np.ndarray
    estimate: np.ndarray
    wse_per_trial: list[float]
    bins: list[Bin]
    config: dict = field(default_factory=dict)

    @property
    def wse(self) -> float:
        return float(np.mean(self.wse_per_trial))

    @property
    def clamped(self) -> np.ndarray:
        return self.estimate <= 1.0

    def write_csv(self, out_dir, prefix: str = "report") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / f"{prefix}_{name}.csv" for name in ("flows", "bins", "scalars")}
        with open(paths["flows"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "flow_id", "truth", "estimate", "clamped"])
            clamped = self.clamped.astype(int).tolist()
            w.writerows(zip(self.trial.tolist(), self.flow_id.tolist(), self.truth.tolist(),
                            map(repr, self.estimate.tolist()), clamped))
        with open(paths["bins"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "bias", "stderr", "count"])
            for b in self.bins:
                w.writerow([b.lo, b.hi, repr(b.bias), repr(b.stderr), b.count])
        with open(paths["scalars"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "value"])
            w.writerow(["estimator", self.estimator])
            w.writerow(["wse", repr(self.wse)])
            for i, v in enumerate(self.wse_per_trial):
                w.writerow([f"wse_trial_{i}", repr(v)])
            w.writerow(["clamped_flows", int(self.clamped.sum())])
            for key, value in self.config.items():
                w.writerow([f"config.{key}", value])
        return paths


def _trial_trace(cfg: ExperimentConfig, t: int) -> Trace:
    if cfg.traces:
        return read_trace(cfg.traces[t % len(cfg.traces)])
    return generate_trace(cfg.flows, ZipfModel(cfg.pi, cfg.card_max), cfg.seed + t)


def _run_trial(cfg: ExperimentConfig, t: int) -> TrialData:
    trace = _trial_trace(cfg, t)
    trial = prepare_trial(trace, cfg.m, cfg.k, cfg.register_width, cfg.element_seed + t,
                          cfg.flow_seed + t, cfg.total_method, cfg.aux_k)
    return trial


def load_trials(cfg: ExperimentConfig) -> list[TrialData]:
    """Sketch every trial of ``cfg``, fanning out over ``cfg.parallel`` processes."""
    cfg.validate()
    if cfg.parallel > 1 and cfg.trials > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.parallel, cfg.trials)) as ex:
            return list(ex.map(_run_trial, [cfg] * cfg.trials, range(cfg.trials)))
    return [_run_trial(cfg, t) for t in range(cfg.trials)]


def run_experiment(cfg: ExperimentConfig) -> EvaluationReport:
    """Run ``cfg.trials`` independent trials of one estimator and score them."""
    return score_trials(load_trials(cfg), cfg)


def score_trials(trials: Sequence[TrialData], cfg: ExperimentConfig) -> EvaluationReport:
    calibration = None
    if cfg.estimator == "vll-theta" and cfg.calibration == "fitted":
        fits = np.array([fit_trial_calibration(t, cfg.theta, cfg.pi) for t in trials])
        calibration = tuple(float(v) for v in fits.mean(axis=0))
    cols: dict[str, list[np.ndarray]] = {"trial": [], "flow_id": [], "truth": [], "estimate": []}
    wses = []
    for i, t in enumerate(trials):
        est = estimate_flows(t, cfg.estimator, cfg.theta, cfg.n_max, calibration)
        wses.append(wse(t.truths, est, weights(t.truths, cfg.pi)))
        cols["trial"].append(np.full(t.truths.size, i, dtype=np.int64))
        cols["flow_id"].append(t.flow_ids)
        cols["truth"].append(t.truths)
        cols["estimate"].append(est)
    merged = {key: np.concatenate(v) for key, v in cols.items()}
    config = cfg.echo()
    if calibration is not None:
        config["fitted_alpha"], config["fitted_beta"] = calibration
    return EvaluationReport(cfg.estimator, merged["trial"], merged["flow_id"], merged["truth"],
                            merged["estimate"], wses,
                            binned_error_report(merged["truth"], merged["estimate"]), config)


# ---------------------------------------------------------------------------
# single-flow experiments


def single_flow_histograms(n: int, ks: Sequence[int], trials: int, seed: int = 0,
                           register_width: int = 5) -> dict[int, np.ndarray]:
    """Register-value histograms of single-flow sketches of n distinct elements.

    Trial ``t`` hashes elements 0..n-1 with element seed ``seed + t``; every
    k in ``ks`` is built from the same hashes.
    """
    r_max = (1 << register_width) - 1
    elements = np.arange(n, dtype=np.uint64)
    out = {k: np.empty((trials, r_max + 1), dtype=np.int64) for k in ks}
    for t in range(trials):
        h = hashing.hash_tokens_array(elements, seed + t)
        for k in ks:
            cfg = HashConfig(element_seed=seed + t, prefix_bits=k.bit_length() - 1)
            out[k][t] = np.bincount(registers_from_hashes(h, cfg, r_max), minlength=r_max + 1)
    return out


def relative_std_error(estimates, n: float) -> float:
    """sqrt(Var(est)) / n."""
    return float(np.std(np.asarray(estimates, dtype=np.float64)) / n)


def ll_theta_estimates(hist: np.ndarray, theta: float) -> np.ndarray:
    return xi_theta(theta) * rough_estimates(hist, theta)


@dataclass
class XiRow:
    theta: float
    xi_hat: float
    xi_fit: float
    sd: float
    trials: int


def fit_xi(n: int, k: int, thetas: Sequence[float], trials: int, seed: int = 0) -> tuple[list[XiRow], tuple[float, float]]:
    """Empirical xi_theta = mean of n / (k A_theta) and its least-squares line.

    Returns rows plus ``(intercept, slope)`` of the line through them.
    """
    hist = single_flow_histograms(n, [k], trials, seed)[k]
    rows = []
    for theta in thetas:
        ratio = n / rough_estimates(hist, theta)
        fit = 0.401 - 0.318 * theta
        rows.append(XiRow(float(theta), float(ratio.mean()), fit, float(ratio.std()), trials))
    if len(rows) >= 2:
        slope, intercept = np.polyfit([r.theta for r in rows], [r.xi_hat for r in rows], 1)
    else:
        slope, intercept = math.nan, math.nan
    return rows, (float(intercept), float(slope))


def rse_sweep(hist: np.ndarray, n: int, grid: Sequence[float]) -> list[tuple[float, float]]:
    """Relative standard error of LL_theta for each theta over the same arrays."""
    return [(float(th), relative_std_error(ll_theta_estimates(hist, th), n)) for th in grid]


def theta_grid(lo: float = -3.0, hi: float = 1.0, step: float = 0.1) -> list[float]:
    count = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(count + 1)]


def default_parallelism() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
