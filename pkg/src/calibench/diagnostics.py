"""Runs-based stationarity test and two-sample Kolmogorov-Smirnov test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import kolmogorov, ndtr


@dataclass(frozen=True)
class TestResult:
    test: str
    statistic: float
    p_value: float
    n: tuple[int, ...]

    def as_dict(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "p_value": self.p_value, "n": list(self.n)}


def stationarity_runs_test(series, n_windows: int = 20) -> TestResult:
    """Wald-Wolfowitz runs test on window means above/below their median.

    The series is cut into ``n_windows`` contiguous windows of equal length
    (trailing remainder dropped).  Ties with the median count as below.  The
    statistic is the normal-approximation z score; p is two-sided.
    """
    x = np.asarray(series, dtype=float)
    if n_windows < 2 or x.size < 2 * n_windows:
        raise ValueError(f"need at least {2 * n_windows} observations for {n_windows} windows")
    w = x.size // n_windows
    means = x[: w * n_windows].reshape(n_windows, w).mean(axis=1)
    above = means > np.median(means)
    n1 = int(above.sum())
    n2 = n_windows - n1
    if n1 == 0 or n2 == 0:
        raise ValueError("all window means are equal; runs test undefined")
    runs = 1 + int(np.count_nonzero(above[1:] != above[:-1]))
    n = n_windows
    mean = 2.0 * n1 * n2 / n + 1.0
    var = 2.0 * n1 * n2 * (2.0 * n1 * n2 - n) / (n * n * (n - 1.0))
    z = (runs - mean) / math.sqrt(var)
    p = 2.0 * (1.0 - ndtr(abs(z)))
    return TestResult("runs_stationarity", float(z), float(min(max(p, 0.0), 1.0)), (x.size,))


def ks_statistic(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def ks_two_sample(a, b) -> TestResult:
    """Two-sample KS test with the asymptotic Kolmogorov p-value."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    D = ks_statistic(a, b)
    en = a.size * b.size / (a.size + b.size)
    p = float(kolmogorov(math.sqrt(en) * D))
    return TestResult("ks_two_sample", D, min(max(p, 0.0), 1.0), (a.size, b.size))
