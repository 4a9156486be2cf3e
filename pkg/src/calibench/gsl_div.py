"""GSL-div: weighted subtracted divergence between symbolised word distributions.

Each series is discretised on its own [min, max] support, so the criterion
cannot see additive constants (or positive rescaling).  That blindness is a
deliberate, tested property.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from calibench._kernels import gsl_contributions
from calibench.models import as_matrix
from calibench.msm import DegenerateSeriesError

DENSE_LIMIT = 1 << 24


@dataclass(frozen=True)
class SymbolSequence:
    symbols: np.ndarray
    b: int
    support: tuple[float, float]


@dataclass(frozen=True)
class WordDistribution:
    l: int
    b: int
    probabilities: dict[tuple[int, ...], float]

    def entropy(self) -> float:
        return shannon_entropy(np.fromiter(self.probabilities.values(), dtype=float))


def shannon_entropy(p: np.ndarray) -> float:
    """Base-2 entropy with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def _symbolize_rows(X: np.ndarray, b: int) -> np.ndarray:
    lo = X.min(axis=1, keepdims=True)
    hi = X.max(axis=1, keepdims=True)
    if np.any(hi <= lo):
        raise DegenerateSeriesError("cannot symbolise a constant series")
    s = np.floor((X - lo) / (hi - lo) * b).astype(np.int64)
    np.minimum(s, b - 1, out=s)
    return s


def symbolize(series, b: int = 10) -> SymbolSequence:
    if b < 2:
        raise ValueError("alphabet size must be at least 2")
    x = np.asarray(series, dtype=float)
    s = _symbolize_rows(x[None, :], b)[0]
    return SymbolSequence(s, b, (float(x.min()), float(x.max())))


def _word_codes(S: np.ndarray, b: int, l: int) -> np.ndarray:
    """Integer code of every stride-1 window of length l, row-wise."""
    n = S.shape[1]
    if n < l:
        raise ValueError(f"series of length {n} is shorter than window {l}")
    codes = np.zeros((S.shape[0], n - l + 1), dtype=np.int64)
    for j in range(l):
        codes *= b
        codes += S[:, j : n - l + 1 + j]
    return codes


def word_distribution(s: SymbolSequence, l: int) -> WordDistribution:
    codes = _word_codes(s.symbols[None, :], s.b, l)[0]
    uniq, counts = np.unique(codes, return_counts=True)
    probs = counts / counts.sum()
    words = {}
    for code, p in zip(uniq.tolist(), probs.tolist()):
        digits = []
        for _ in range(l):
            code, d = divmod(code, s.b)
            digits.append(d)
        words[tuple(reversed(digits))] = p
    return WordDistribution(l, s.b, words)


def _mean_distribution(codes: np.ndarray, size: int | None):
    """Average of the per-row empirical distributions over the code space.

    Returns (support codes, probabilities); ``support`` is None when a dense
    array indexed by code is returned.
    """
    R, n = codes.shape
    weights = np.full(codes.size, 1.0 / (R * n))
    if size is not None:
        return None, np.bincount(codes.ravel(), weights=weights, minlength=size)
    uniq, inv = np.unique(codes.ravel(), return_inverse=True)
    return uniq, np.bincount(inv, weights=weights)


def progressive_weights(L: int) -> np.ndarray:
    l = np.arange(1, L + 1)
    return 2.0 * l / (L * (L + 1))


class GSLReference:
    """Precomputed real-data word distributions for repeated evaluation."""

    def __init__(self, real, b: int = 10, L: int = 6):
        if b < 2 or L < 1:
            raise ValueError("need b >= 2 and L >= 1")
        self.b = b
        self.L = L
        x = np.asarray(real, dtype=float)
        self.n = x.size
        S = _symbolize_rows(x[None, :], b)
        self._real = [self._dist(_word_codes(S, b, l), l) for l in range(1, L + 1)]
        self._fast = b**L <= DENSE_LIMIT
        if self._fast:
            dense = [r for _, r in self._real]
            sups = [np.flatnonzero(r) for r in dense]
            self._flat = np.concatenate(dense)
            self._off = np.concatenate([[0], np.cumsum([r.size for r in dense])]).astype(np.int64)
            self._sup = np.concatenate(sups).astype(np.int64)
            self._sup_off = np.concatenate([[0], np.cumsum([q.size for q in sups])]).astype(np.int64)
            self._work = np.zeros(b**L, dtype=np.int32)

    def _size(self, l: int) -> int | None:
        size = self.b**l
        return size if size <= DENSE_LIMIT else None

    def _dist(self, codes: np.ndarray, l: int):
        return _mean_distribution(codes, self._size(l))

    def contributions(self, ensemble) -> np.ndarray:
        X = as_matrix(ensemble)
        if X.shape[0] == 0:
            raise ValueError("empty ensemble")
        S = _symbolize_rows(X, self.b)
        if X.shape[1] < self.L:
            raise ValueError(f"series of length {X.shape[1]} is shorter than window {self.L}")
        if self._fast:
            touched = np.empty(S.size, dtype=np.int64)
            return gsl_contributions(
                S, self.b, self.L, self._flat, self._off, self._sup, self._sup_off, self._work, touched
            )
        return self._contributions_numpy(S)

    def _contributions_numpy(self, S: np.ndarray) -> np.ndarray:
        out = np.empty(self.L)
        for i, l in enumerate(range(1, self.L + 1)):
            f_sup, f = self._dist(_word_codes(S, self.b, l), l)
            r_sup, r = self._real[i]
            if f_sup is None:
                m = 0.5 * (f + r)
            else:
                # align the two sparse supports
                sup = np.union1d(f_sup, r_sup)
                fa = np.zeros(sup.size)
                ra = np.zeros(sup.size)
                fa[np.searchsorted(sup, f_sup)] = f
                ra[np.searchsorted(sup, r_sup)] = r
                f, m = fa, 0.5 * (fa + ra)
            out[i] = 2.0 * shannon_entropy(m) - shannon_entropy(f)
        return out

    def __call__(self, ensemble) -> float:
        return float(progressive_weights(self.L) @ self.contributions(ensemble))


def gsl_div(real, ensemble, b: int = 10, L: int = 6) -> float:
    return GSLReference(real, b, L)(ensemble)
