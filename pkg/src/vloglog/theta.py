"""Generalized-mean estimators: LL_theta for single arrays, vLL_theta for pools.

theta = 0 is LogLog (geometric mean), theta = -1 is HyperLogLog (harmonic
mean); the per-flow estimator at theta = -1 is vHLL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .sketch import RegisterArray, RegisterPool, VirtualView

THETA_MIN = -3.0
THETA_MAX = 1.0

# single-flow bias constants for LogLog and HLL at large k
ETA = 0.39701
GAMMA = 0.7213

_LN2 = math.log(2.0)


class OutOfFitRangeError(ValueError):
    """theta lies outside the range where the linear xi_theta fit holds."""


class SingularFitError(ValueError):
    pass


def generalized_mean(values: Sequence[float], theta: float) -> float:
    """Power mean ``((1/k) sum x**theta) ** (1/theta)``; geometric mean at 0.

    Evaluated in log space so large ``|theta|`` does not overflow.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("generalized mean of an empty sequence")
    if np.any(~(x > 0)):
        raise ValueError("generalized mean needs strictly positive values")
    logs = np.log(x)
    s = theta * logs
    if theta == 0:
        log_a = logs.mean()
    elif np.abs(s).max() < 1e-6:
        # cumulant series; avoids dividing a quantized s by a tiny theta
        log_a = logs.mean() + 0.5 * theta * logs.var()
    elif np.abs(s).max() < 1.0:
        # near theta = 0 the shifted form cancels; expm1/log1p keeps precision
        log_a = math.log1p(np.mean(np.expm1(s))) / theta
    else:
        c = s.max()
        log_a = (c + math.log(np.mean(np.exp(s - c)))) / theta
    out = math.exp(log_a)
    # clip rounding noise so min <= A <= max holds exactly
    return float(min(max(out, x.min()), x.max()))


def xi_theta(theta: float) -> float:
    """Linear fit of the bias coefficient: 0.401 - 0.318 * theta."""
    if not THETA_MIN <= theta <= THETA_MAX:
        raise OutOfFitRangeError(
            f"theta={theta} outside the fitted range [{THETA_MIN}, {THETA_MAX}]"
        )
    return 0.401 - 0.318 * theta


def mean_pow2_from_histograms(hist: np.ndarray, theta: float) -> np.ndarray:
    """A_theta(2**v) for each row of value counts ``hist`` (shape (..., r_max+1))."""
    hist = np.asarray(hist, dtype=np.float64)
    k = hist.sum(axis=-1)
    levels = np.arange(hist.shape[-1], dtype=np.float64)
    if theta == 0:
        return np.exp2((hist @ levels) / k)
    s = theta * _LN2 * levels
    if np.abs(s).max() < 1e-6:
        mu = (hist @ levels) / k
        var = (hist @ levels**2) / k - mu**2
        return np.exp2(mu + 0.5 * theta * _LN2 * var)
    if np.abs(s).max() < 1.0:
        return np.exp(np.log1p((hist @ np.expm1(s)) / k) / theta)
    # exponents stay within 2**[-93, 31] for theta in [-3, 1], r_max = 31
    return ((hist @ np.exp(s)) / k) ** (1.0 / theta)


def rough_estimates(hist: np.ndarray, theta: float) -> np.ndarray:
    """k * A_theta(2**R_f[0], ..., 2**R_f[k-1]) per row of ``hist``."""
    hist = np.asarray(hist)
    return hist.sum(axis=-1) * mean_pow2_from_histograms(hist, theta)


def ll_theta_estimate(array: RegisterArray, theta: float) -> float:
    """xi_theta * k * A_theta(2**S[0], ..., 2**S[k-1])."""
    xi = xi_theta(theta)
    return xi * float(rough_estimates(array.histogram(), theta))


def hll_estimate(array: RegisterArray) -> float:
    return ll_theta_estimate(array, -1.0)


@dataclass(frozen=True)
class TotalEstimate:
    n_hat_T: float
    method: Literal["pool-hll", "grand-flow-aux"] = "pool-hll"

    def __post_init__(self) -> None:
        if not self.n_hat_T >= 0:
            raise ValueError("total estimate must be non-negative")


def estimate_total(pool: RegisterPool) -> TotalEstimate:
    """HLL over all m pool registers as a rough estimate of the total cardinality."""
    hist = np.bincount(pool.registers, minlength=pool.r_max + 1)
    n_t = xi_theta(-1.0) * float(rough_estimates(hist, -1.0))
    return TotalEstimate(n_t, "pool-hll")


def estimate_total_grand_flow(aux: RegisterArray) -> TotalEstimate:
    """Total cardinality from an auxiliary sketch of all (flow, element) pairs."""
    return TotalEstimate(hll_estimate(aux), "grand-flow-aux")


@dataclass(frozen=True)
class ThetaConfig:
    """Parameters of one vLL_theta estimator.

    ``alpha`` and ``beta`` left as ``None`` select the practical calibration
    ``beta = m/(m-k) * xi`` and ``alpha = -k/(m-k) * n_hat_T``.
    """

    theta: float = -1.0
    xi: float | None = None
    alpha: float | None = None
    beta: float | None = None

    def __post_init__(self) -> None:
        if not THETA_MIN <= self.theta <= THETA_MAX:
            raise OutOfFitRangeError(f"theta={self.theta} outside [{THETA_MIN}, {THETA_MAX}]")
        if self.xi is None:
            object.__setattr__(self, "xi", xi_theta(self.theta))
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")

    def calibration(self, total: TotalEstimate, m: int, k: int) -> tuple[float, float]:
        if m <= k:
            raise ValueError(f"vLL_theta needs m > k, got m={m}, k={k}")
        alpha = -k / (m - k) * total.n_hat_T if self.alpha is None else self.alpha
        beta = m / (m - k) * self.xi if self.beta is None else self.beta
        return alpha, beta


def vll_theta_from_histograms(hist: np.ndarray, total: TotalEstimate, cfg: ThetaConfig,
                              m: int) -> np.ndarray:
    """Vectorized per-flow vLL_theta estimates, clamped below at 1."""
    hist = np.asarray(hist)
    k = int(hist[0].sum()) if hist.ndim > 1 else int(hist.sum())
    alpha, beta = cfg.calibration(total, m, k)
    return np.maximum(1.0, alpha + beta * rough_estimates(hist, cfg.theta))


def vll_theta_estimate(view: VirtualView, total: TotalEstimate, cfg: ThetaConfig, m: int) -> float:
    """max(1, alpha + beta * k * A_theta(2**R_f[i]))."""
    nbins = int(view.values.max(initial=0)) + 1
    hist = np.bincount(view.values, minlength=nbins)
    return float(vll_theta_from_histograms(hist, total, cfg, m))


def fit_calibration(rough: Sequence[float], truths: Sequence[float],
                    weights: Sequence[float]) -> tuple[float, float]:
    """Weighted least squares (alpha, beta) minimizing sum w (n - alpha - beta * rough)**2."""
    x = np.asarray(rough, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if not x.shape == y.shape == w.shape or x.ndim != 1:
        raise ValueError("rough, truths and weights must be 1-d and equally long")
    if x.size < 2:
        raise ValueError("need at least two points to fit")
    if np.any(~(w > 0)):
        raise ValueError("weights must be positive")
    w = w / w.sum()
    xm = w @ x
    ym = w @ y
    # centered moments; algebraically the same as xy_bar - x_bar * y_bar
    dx = x - xm
    var = w @ (dx * dx)
    if var <= 1e-15 * max(1.0, xm * xm):
        raise SingularFitError("rough estimates have zero weighted variance")
    beta = (w @ (dx * (y - ym))) / var
    return float(ym - beta * xm), float(beta)
