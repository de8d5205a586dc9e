"""Forecast metrics, bootstrap confidence intervals, paired significance.

The concordance correlation coefficient uses population variances (divide
by n).  Bootstrap intervals resample locations with replacement and take
the 2.5/97.5 percentiles with zero-based linear interpolation.  The t-test
is paired and two-sided, with the tail probability evaluated through the
regularized incomplete beta function.
"""

from __future__ import annotations

import numpy as np
from scipy.special import betainc

from .autodiff import ContractError, DimensionError


class UndefinedMetricError(ValueError):
    """The metric is mathematically undefined on this input."""


class DegenerateStatisticError(ValueError):
    """The test statistic is undefined (identical pairs)."""


def _pair(pred, truth, what: str):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.ndim != 1 or t.ndim != 1:
        raise DimensionError(f"{what}: inputs must be 1-D")
    if p.shape != t.shape:
        raise DimensionError(f"{what}: lengths {p.shape[0]} and {t.shape[0]} differ")
    if p.shape[0] == 0:
        raise DimensionError(f"{what}: inputs are empty")
    return p, t


def mse_mae(pred, truth) -> tuple[float, float]:
    """Mean squared and mean absolute error."""
    p, t = _pair(pred, truth, "mse_mae")
    diff = p - t
    return float(np.mean(diff * diff)), float(np.mean(np.abs(diff)))


def ccc(x, y) -> float:
    """Concordance correlation: 2*cov / (var_x + var_y + (mean_x - mean_y)^2)."""
    xv, yv = _pair(x, y, "ccc")
    if xv.shape[0] < 2:
        raise DimensionError("ccc needs at least 2 samples")
    mx, my = xv.mean(), yv.mean()
    vx, vy = xv.var(), yv.var()  # population variances
    if vx == 0.0 or vy == 0.0:
        raise UndefinedMetricError("ccc undefined for zero-variance input")
    cov = float(np.mean((xv - mx) * (yv - my)))
    return float(2.0 * cov / (vx + vy + (mx - my) ** 2))


def bootstrap_ci(scores, b: int = 1000, seed: int = 0, aggregate=np.mean) -> tuple[float, float]:
    """(2.5th, 97.5th) percentile interval of the aggregate over B resamples.

    Locations are resampled with replacement; percentiles use linear
    interpolation at zero-based index p*(n-1).  Deterministic given seed.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] == 0:
        raise ContractError("bootstrap needs a nonempty 1-D score vector")
    if b < 1:
        raise ContractError("bootstrap needs at least 1 resample")
    n = scores.shape[0]
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(b, n))
    aggregates = np.array([aggregate(scores[row]) for row in draws])
    lo, hi = np.percentile(aggregates, [2.5, 97.5], method="linear")
    return float(lo), float(hi)


def paired_t_test(errors_a, errors_b) -> float:
    """Two-sided p-value of the paired t-test on a - b.

    Zero-variance differences with nonzero mean map to an infinite statistic
    and are reported as p = 0.0; identical pairs are degenerate.
    """
    a, b = _pair(errors_a, errors_b, "paired_t_test")
    if a.shape[0] < 2:
        raise DimensionError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    n = d.shape[0]
    if sd == 0.0:
        if mean == 0.0:
            raise DegenerateStatisticError("all paired differences are identical zeros")
        return 0.0  # |t| = inf; underflow floor
    t = mean / (sd / np.sqrt(n))
    df = n - 1
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))
