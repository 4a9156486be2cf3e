"""Method of simulated moments: moment vector, bootstrap weights, distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from calibench._kernels import moment_rows
from calibench.models import as_matrix

MOMENT_NAMES = (
    "variance",
    "kurtosis",
    "acf_raw_1",
    "acf_abs_1",
    "acf_sq_1",
    "acf_abs_5",
    "acf_sq_5",
)

RIDGE_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2)
MAX_CONDITION = 1e12


class DegenerateSeriesError(ValueError):
    """A series (or pool) has zero variance, so the statistic is undefined."""


@dataclass(frozen=True)
class WeightMatrix:
    W: np.ndarray
    ridge: float
    covariance: np.ndarray


def _acf(y: np.ndarray, lag: int) -> np.ndarray:
    """Row-wise sample autocorrelation; rows with constant y give 0."""
    d = y - y.mean(axis=1, keepdims=True)
    den = np.einsum("ij,ij->i", d, d)
    num = np.einsum("ij,ij->i", d[:, lag:], d[:, :-lag])
    out = np.zeros_like(den)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def moment_matrix(X) -> np.ndarray:
    """Moment vectors for every row of ``X`` (shape R x 7).

    Variance and kurtosis are central; the raw-series autocorrelation is
    demeaned as usual, while |x| and x^2 are formed from the levels so that
    they respond to the location of the series.
    """
    X = as_matrix(X)
    if X.shape[1] < 7:
        raise ValueError("moments need at least 7 observations")
    out = moment_rows(np.ascontiguousarray(X))
    scale = np.maximum(np.max(np.abs(X), axis=1), 1.0)
    if np.any(out[:, 0] <= (1e-14 * scale) ** 2):
        raise DegenerateSeriesError("constant series has degenerate moments")
    return out


def compute_moments(series) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.ndim != 1:
        raise ValueError("compute_moments takes a single series")
    return moment_matrix(x[None, :])[0]


def block_bootstrap(series: np.ndarray, block_len: int, B: int, rng: np.random.Generator) -> np.ndarray:
    """B overlapping-block resamples of ``series``, each of the original length."""
    x = np.asarray(series, dtype=float)
    n = x.size
    if not 0 < block_len < n:
        raise ValueError("block_len must be positive and shorter than the series")
    n_blocks = -(-n // block_len)
    starts = rng.integers(0, n - block_len + 1, size=(B, n_blocks))
    idx = (starts[:, :, None] + np.arange(block_len)).reshape(B, -1)[:, :n]
    return x[idx]


def weight_from_covariance(cov: np.ndarray) -> WeightMatrix:
    """Invert a moment covariance, climbing the ridge ladder until well conditioned."""
    cov = np.asarray(cov, dtype=float)
    k = cov.shape[0]
    eye = np.eye(k)
    for lam in RIDGE_LADDER:
        A = cov + lam * eye
        if np.linalg.cond(A) < MAX_CONDITION:
            W = np.linalg.inv(A)
            return WeightMatrix(0.5 * (W + W.T), lam, cov)
    raise np.linalg.LinAlgError("moment covariance could not be regularised")


def estimate_weight_matrix(real_series, block_len: int = 25, B: int = 2000, seed: int = 0) -> WeightMatrix:
    rng = np.random.Generator(np.random.Philox(seed))
    boot = block_bootstrap(real_series, block_len, B, rng)
    moments = moment_matrix(boot)
    return weight_from_covariance(np.cov(moments, rowvar=False))


def msm_objective(real_m, ensemble, W) -> float:
    """Quadratic distance between the ensemble-mean moments and the real moments."""
    X = as_matrix(ensemble)
    if X.shape[0] == 0:
        raise ValueError("empty ensemble")
    Wm = W.W if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    g = moment_matrix(X).mean(axis=0) - np.asarray(real_m, dtype=float)
    return float(max(g @ Wm @ g, 0.0))
