"""Maximum-likelihood per-flow estimation (vLL-MLE).

A flow's registers are modelled as i.i.d. ``Z_n = max(Z', W_n)``, where
``Z'`` is the background noise from other flows (approximated by the
empirical distribution of the whole pool) and ``W_n`` is the maximum of a
Poisson(n/k) number of Geometric(1/2) variables, so that
``P(W_n <= i) = exp(-(n/k) 2**-i)``. The log-likelihood is concave in n and
is maximized by a bisection on log scale.

Single-flow MLE is the special case with no noise (``F_Z == 1``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .sketch import RegisterArray, RegisterPool, VirtualView

# stands in for ln(0) so comparisons in the search stay total
IMPOSSIBLE = -1e18
DEFAULT_NMAX = 10**6


@dataclass(frozen=True)
class NoiseCdf:
    """CDF of a pool register value, F_Z(0..r_max)."""

    cdf: np.ndarray

    def __post_init__(self) -> None:
        cdf = np.asarray(self.cdf, dtype=np.float64)
        if cdf.ndim != 1 or cdf.size < 1:
            raise ValueError("noise CDF must be a non-empty 1-d sequence")
        if np.any(cdf < 0) or np.any(cdf > 1):
            raise ValueError("noise CDF values must lie in [0, 1]")
        if np.any(np.diff(cdf) < 0):
            raise ValueError("noise CDF must be nondecreasing")
        if cdf[-1] != 1.0:
            raise ValueError("noise CDF must end at 1")
        object.__setattr__(self, "cdf", cdf)

    @property
    def r_max(self) -> int:
        return self.cdf.size - 1

    @classmethod
    def noise_free(cls, r_max: int = 31) -> NoiseCdf:
        return cls(np.ones(r_max + 1))

    def to_csv(self, fh: TextIO) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "cdf"])
        for i, c in enumerate(self.cdf):
            w.writerow([i, repr(float(c))])

    @classmethod
    def from_csv(cls, fh: TextIO) -> NoiseCdf:
        rows = list(csv.DictReader(fh))
        values = [int(r["value"]) for r in rows]
        if values != list(range(len(values))):
            raise ValueError("noise CDF rows must list values 0..r_max in order")
        return cls(np.array([float(r["cdf"]) for r in rows]))


def empirical_noise_cdf(pool: RegisterPool) -> NoiseCdf:
    """F_Z(i) = #{j : R[j] <= i} / m."""
    counts = np.bincount(pool.registers, minlength=pool.r_max + 1)
    cdf = np.cumsum(counts) / pool.m
    cdf[-1] = 1.0
    return NoiseCdf(cdf)


def wn_cdf(n: float, k: int, i: int, r_max: int = 31) -> float:
    """Poissonized P(W_n <= i); the saturated top value carries all tail mass."""
    if not 0 <= i <= r_max:
        raise ValueError(f"register value {i} outside [0, {r_max}]")
    if i == r_max:
        return 1.0
    return math.exp(-(n / k) / 2.0**i)


def _log_wn_cdf(n: np.ndarray, k: int, r_max: int) -> np.ndarray:
    """ln F_{W_n}(i) for each n (rows) and i (columns)."""
    scale = np.exp2(-np.arange(r_max + 1, dtype=np.float64))
    scale[-1] = 0.0
    return -(np.asarray(n, dtype=np.float64)[..., None] / k) * scale


def _log1mexp(d: np.ndarray) -> np.ndarray:
    # ln(1 - e**d) for d <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d > -math.log(2.0), np.log(-np.expm1(d)), np.log1p(-np.exp(d)))


def log_zn_pmf(noise: NoiseCdf, n, k: int) -> np.ndarray:
    """ln p_{Z_n}(i), computed in log space; -inf marks zero probability."""
    with np.errstate(divide="ignore"):
        log_fz = np.log(noise.cdf)
    log_a = log_fz + _log_wn_cdf(n, k, noise.r_max)
    out = np.empty_like(log_a)
    out[..., 0] = log_a[..., 0]
    with np.errstate(invalid="ignore"):
        d = log_a[..., :-1] - log_a[..., 1:]
        d = np.where(np.isneginf(log_a[..., :-1]), -np.inf, d)
        out[..., 1:] = log_a[..., 1:] + _log1mexp(np.minimum(d, 0.0))
    out[np.isneginf(log_a)] = -np.inf
    return out


def zn_pmf(noise: NoiseCdf, n: float, k: int) -> np.ndarray:
    """p(0) = F_Z(0) F_W(0); p(i) = F_Z(i) F_W(i) - F_Z(i-1) F_W(i-1)."""
    cdf = noise.cdf * np.exp(_log_wn_cdf(n, k, noise.r_max))
    return np.diff(cdf, prepend=0.0).clip(min=0.0)


def _score(hist: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    # sum_i c_i ln p(i) with the impossible-observation sentinel
    finite = np.where(np.isneginf(log_p), IMPOSSIBLE, log_p)
    total = np.einsum("...i,...i->...", hist, finite)
    return np.maximum(total, IMPOSSIBLE)


@dataclass(frozen=True)
class LikelihoodModel:
    """A flow's register-value histogram together with the noise model."""

    noise: NoiseCdf
    histogram: np.ndarray

    def __post_init__(self) -> None:
        hist = np.asarray(self.histogram, dtype=np.float64)
        if hist.shape != self.noise.cdf.shape:
            raise ValueError("histogram must have r_max + 1 bins")
        object.__setattr__(self, "histogram", hist)

    @property
    def k(self) -> int:
        return int(round(self.histogram.sum()))

    @property
    def r_max(self) -> int:
        return self.noise.r_max

    def log_likelihood(self, n) -> np.ndarray | float:
        out = _score(self.histogram, log_zn_pmf(self.noise, n, self.k))
        return float(out) if np.ndim(out) == 0 else out


def _pad_hist(values: np.ndarray, r_max: int) -> np.ndarray:
    values = np.asarray(values)
    if values.size and values.max() > r_max:
        raise ValueError("register value above the noise CDF's r_max")
    return np.bincount(values, minlength=r_max + 1)


def log_likelihood(view: VirtualView, noise: NoiseCdf, n) -> float:
    """L_f(n) = sum_j ln p_{Z_n}(R_f[j]), via the value histogram."""
    return LikelihoodModel(noise, _pad_hist(view.values, noise.r_max)).log_likelihood(n)


def _isqrt_floor(x: np.ndarray) -> np.ndarray:
    r = np.floor(np.sqrt(x.astype(np.float64))).astype(np.int64)
    r -= (r * r > x)
    r += ((r + 1) * (r + 1) <= x)
    return r


def mle_from_histograms(hist: np.ndarray, noise: NoiseCdf, n_max: int = DEFAULT_NMAX,
                        chunk: int = 1 << 17) -> np.ndarray:
    """Log-scale bisection for argmax_n L_f(n), n in 1..n_max, for each row of ``hist``.

    Each step compares L at ``mid1 = floor(sqrt(lb * ub))`` and ``mid1 + 1``
    and keeps the half holding the maximum; ties go to the smaller n. Flows
    share most of their search path, so log-pmf rows are computed once per
    distinct candidate n.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    hist = np.atleast_2d(np.asarray(hist))
    if hist.shape[1] != noise.r_max + 1:
        raise ValueError("histogram width does not match the noise CDF")
    out = np.empty(hist.shape[0], dtype=np.int64)
    for lo in range(0, hist.shape[0], chunk):
        out[lo : lo + chunk] = _bisect(hist[lo : lo + chunk].astype(np.float64), noise, n_max)
    return out


def _scores_at(hist: np.ndarray, noise: NoiseCdf, k: np.ndarray, n: np.ndarray) -> np.ndarray:
    key = np.stack([n, k], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    table = np.empty((uniq.shape[0], noise.r_max + 1))
    for kk in np.unique(uniq[:, 1]):
        rows = uniq[:, 1] == kk
        table[rows] = log_zn_pmf(noise, uniq[rows, 0], int(kk))
    return _score(hist, table[inv])


def _bisect(hist: np.ndarray, noise: NoiseCdf, n_max: int) -> np.ndarray:
    f = hist.shape[0]
    k = np.rint(hist.sum(axis=1)).astype(np.int64)
    lb = np.ones(f, dtype=np.int64)
    ub = np.full(f, n_max, dtype=np.int64)
    active = np.flatnonzero(ub - lb > 1)
    while active.size:
        a_lb, a_ub = lb[active], ub[active]
        mid1 = _isqrt_floor(a_lb * a_ub)
        mid2 = mid1 + 1
        h = hist[active]
        left = _scores_at(h, noise, k[active], mid1) >= _scores_at(h, noise, k[active], mid2)
        ub[active] = np.where(left, mid1, a_ub)
        lb[active] = np.where(left, a_lb, mid2)
        active = active[ub[active] - lb[active] > 1]
    pick_lb = _scores_at(hist, noise, k, lb) >= _scores_at(hist, noise, k, ub)
    return np.where(pick_lb, lb, ub)


def mle_estimate(view: VirtualView, noise: NoiseCdf, n_max: int = DEFAULT_NMAX) -> int:
    """vLL-MLE estimate of one flow's cardinality."""
    return int(mle_from_histograms(_pad_hist(view.values, noise.r_max), noise, n_max)[0])


def single_flow_mle(array: RegisterArray, n_max: int = DEFAULT_NMAX) -> int:
    """MLE for a standalone register array (no background noise)."""
    noise = NoiseCdf.noise_free(array.r_max)
    return int(mle_from_histograms(array.histogram(), noise, n_max)[0])
