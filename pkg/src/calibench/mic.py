"""Markov Information Criterion built on binary context tree weighting.

Contexts are indexed with the most recent bit in the least significant
position, so the depth-d ancestor of a depth-D context ``c`` is ``c % 2**d``
and the two children of depth-d node ``c`` are ``c`` and ``c + 2**d``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from calibench._kernels import ctw_leaf_counts_from_series, ctw_predict, ctw_weights
from calibench.models import as_matrix

LOG2E = 1.0 / math.log(2.0)
CLAMP_WARN_FRACTION = 0.05


@dataclass(frozen=True)
class QuantizerSpec:
    lower: float
    upper: float
    r: int
    L: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError("quantizer needs lower < upper")
        if self.r < 1 or self.L < 1:
            raise ValueError("quantizer needs r >= 1 and L >= 1")

    @property
    def depth(self) -> int:
        return self.L * self.r


# Hyperparameters per model: (b_l, b_u, r, L).
TABLE9 = {
    "ar1": QuantizerSpec(-5.0, 5.0, 5, 3),
    "arma_arch": QuantizerSpec(-30.0, 30.0, 7, 2),
    "rw_break": QuantizerSpec(-15.0, 15.0, 6, 3),
    "brock_hommes": QuantizerSpec(-1.0, 1.0, 8, 2),
}


@dataclass(frozen=True)
class Quantized:
    bins: np.ndarray
    bits: np.ndarray
    clamped_fraction: float


def quantize_bins(X: np.ndarray, q: QuantizerSpec) -> tuple[np.ndarray, float]:
    X = np.asarray(X, dtype=float)
    clamped = float(np.mean((X < q.lower) | (X > q.upper))) if X.size else 0.0
    nbins = 1 << q.r
    Y = np.clip(X, q.lower, q.upper)
    bins = np.floor((Y - q.lower) / (q.upper - q.lower) * nbins).astype(np.int64)
    np.minimum(bins, nbins - 1, out=bins)
    return bins, clamped


def bins_to_bits(bins: np.ndarray, r: int) -> np.ndarray:
    shifts = np.arange(r - 1, -1, -1)
    return ((bins[..., None] >> shifts) & 1).astype(np.uint8).reshape(*bins.shape[:-1], -1)


def quantize(series, q: QuantizerSpec) -> Quantized:
    bins, clamped = quantize_bins(np.asarray(series, dtype=float), q)
    if clamped > CLAMP_WARN_FRACTION:
        warnings.warn(
            f"{clamped:.1%} of observations fall outside [{q.lower}, {q.upper}]; bounds look wrong for this data",
            stacklevel=2,
        )
    return Quantized(bins, bins_to_bits(bins, q.r), clamped)


# --------------------------------------------------------------------------
# context extraction


def stream_contexts(bits, depth: int) -> tuple[np.ndarray, np.ndarray]:
    """(context, bit) for every position >= depth of a single bit stream."""
    b = np.asarray(bits, dtype=np.int64).ravel()
    n = b.size
    if n <= depth:
        raise ValueError(f"stream of {n} bits is not longer than context depth {depth}")
    ctx = np.zeros(n - depth, dtype=np.int64)
    for j in range(1, depth + 1):
        ctx |= b[depth - j : n - j] << (j - 1)
    return ctx, b[depth:]


def bin_contexts(bins: np.ndarray, r: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Same as :func:`stream_contexts` on the r-bit encoding of ``bins`` with depth L*r.

    Works row-wise on a 2-D array without materialising the bit streams.
    """
    B = np.atleast_2d(np.asarray(bins, dtype=np.int64))
    n = B.shape[1]
    if n <= L:
        raise ValueError(f"{n} observations cannot fill a context of {L} observations")
    W = np.zeros((B.shape[0], n - L), dtype=np.int64)
    for i in range(L + 1):
        W |= B[:, L - i : n - i] << (r * i)
    mask = (1 << (L * r)) - 1
    ctx = np.empty((r,) + W.shape, dtype=np.int64)
    bit = np.empty((r,) + W.shape, dtype=np.int64)
    for k in range(r):
        ctx[k] = (W >> (r - k)) & mask
        bit[k] = (W >> (r - 1 - k)) & 1
    return ctx.ravel(), bit.ravel()


# --------------------------------------------------------------------------
# the tree


def log2_kt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """log2 of the Krichevsky-Trofimov block probability for counts (a, b)."""
    return (gammaln(a + 0.5) + gammaln(b + 0.5) - gammaln(a + b + 1.0) - math.log(math.pi)) * LOG2E


_LG_HALF = np.empty(0)
_LG_ONE = np.empty(0)


def _kt_tables(need: int) -> tuple[np.ndarray, np.ndarray]:
    """Cached log2 Gamma(k + 1/2)/sqrt(pi) and log2 Gamma(k + 1) for k < need (at least)."""
    global _LG_HALF, _LG_ONE
    if need > _LG_ONE.size:
        size = max(need, 2 * _LG_ONE.size, 1024)
        i = np.arange(size, dtype=float)
        _LG_HALF = (gammaln(i + 0.5) - 0.5 * math.log(math.pi)) * LOG2E
        _LG_ONE = gammaln(i + 1.0) * LOG2E
    return _LG_HALF, _LG_ONE


class ContextTree:
    """Full binary context tree of fixed depth, stored level by level.

    ``counts[d]`` has shape (2**d, 2): zero and one counts for each depth-d node.
    Estimated and weighted probabilities are derived from the counts on demand.
    """

    def __init__(self, depth: int, leaf_counts: np.ndarray | None = None):
        if depth < 0:
            raise ValueError("depth must be non-negative")
        self.depth = depth
        if leaf_counts is None:
            leaf_counts = np.zeros((1 << depth, 2), dtype=np.int64)
        leaf_counts = np.asarray(leaf_counts, dtype=np.int64)
        if leaf_counts.shape != (1 << depth, 2):
            raise ValueError("leaf counts have the wrong shape")
        levels = [leaf_counts]
        for d in range(depth, 0, -1):
            c = levels[-1]
            half = 1 << (d - 1)
            levels.append(c[:half] + c[half:])
        self.counts = levels[::-1]
        self._log_pe = None
        self._log_pw = None

    @classmethod
    def from_contexts(cls, depth: int, contexts: np.ndarray, bits: np.ndarray) -> "ContextTree":
        leaf = np.bincount(contexts * 2 + bits, minlength=1 << (depth + 1)).reshape(-1, 2)
        return cls(depth, leaf)

    def merge(self, other: "ContextTree") -> "ContextTree":
        if other.depth != self.depth:
            raise ValueError("cannot merge trees of different depth")
        return ContextTree(self.depth, self.counts[-1] + other.counts[-1])

    def _compute(self):
        if self._log_pw is not None:
            return
        flat = np.concatenate(self.counts)
        c0 = np.ascontiguousarray(flat[:, 0])
        c1 = np.ascontiguousarray(flat[:, 1])
        lg_half, lg_one = _kt_tables(int(flat.sum(axis=1).max()) + 1)
        log_pe, log_pw, mix = ctw_weights(c0, c1, self.depth, lg_half, lg_one)
        cuts = [(1 << d) - 1 for d in range(self.depth + 2)]
        self._log_pe = [log_pe[cuts[d] : cuts[d + 1]] for d in range(self.depth + 1)]
        self._log_pw = [log_pw[cuts[d] : cuts[d + 1]] for d in range(self.depth + 1)]
        self._flat = (c0, c1, mix)

    @property
    def log2_pe(self) -> list[np.ndarray]:
        self._compute()
        return self._log_pe

    @property
    def log2_pw(self) -> list[np.ndarray]:
        self._compute()
        return self._log_pw

    @property
    def root_log2_pw(self) -> float:
        return float(self.log2_pw[0][0])

    def predictive_log2(self, contexts: np.ndarray, bits: np.ndarray) -> np.ndarray:
        """log2 P(bit | context) for each query with the tree held fixed.

        Each probability is the ratio of root weighted probabilities with and
        without the bit appended along its context path.
        """
        self._compute()
        ctx = np.ascontiguousarray(contexts, dtype=np.int64)
        y = np.ascontiguousarray(bits, dtype=np.int64)
        if ctx.shape != y.shape:
            raise ValueError("contexts and bits differ in length")
        return ctw_predict(*self._flat, self.depth, ctx.ravel(), y.ravel()).reshape(ctx.shape)


def ctw_train(bitstreams: Iterable[Sequence[int]], depth: int) -> ContextTree:
    """Accumulate KT counts from every stream (bits from index ``depth`` on)."""
    tree = ContextTree(depth)
    for stream in bitstreams:
        ctx, bit = stream_contexts(stream, depth)
        tree = tree.merge(ContextTree.from_contexts(depth, ctx, bit))
    return tree


def ctw_score(tree: ContextTree, bits) -> float:
    """Total code length in bits of ``bits`` under the frozen tree."""
    ctx, bit = stream_contexts(bits, tree.depth)
    return float(-tree.predictive_log2(ctx, bit).sum())


# --------------------------------------------------------------------------
# the criterion


class MICReference:
    """Quantised real data, ready to be scored against many ensembles."""

    def __init__(self, real, q: QuantizerSpec):
        self.q = q
        x = np.asarray(real, dtype=float)
        bins, self.clamped_fraction = quantize_bins(x, q)
        self._ctx, self._bit = bin_contexts(bins[None, :], q.r, q.L)
        self.n_scored = x.size - q.L

    def train(self, ensemble) -> ContextTree:
        X = np.ascontiguousarray(as_matrix(ensemble))
        if X.shape[1] <= self.q.L:
            raise ValueError(f"{X.shape[1]} observations cannot fill a context of {self.q.L} observations")
        leaf, _ = ctw_leaf_counts_from_series(X, self.q.lower, self.q.upper, self.q.r, self.q.L)
        return ContextTree(self.q.depth, leaf)

    def __call__(self, ensemble) -> float:
        tree = self.train(ensemble)
        return float(-tree.predictive_log2(self._ctx, self._bit).sum() / self.n_scored)


def mic_objective(real, ensemble, q: QuantizerSpec) -> float:
    """Cross entropy of the real series, in bits per scored observation."""
    return MICReference(real, q)(ensemble)


def quantizer_diagnostics(series, q: QuantizerSpec) -> dict[str, float]:
    """Occupancy uniformity and successive-word correlation for chosen hyperparameters."""
    bins, clamped = quantize_bins(np.asarray(series, dtype=float), q)
    occupancy = np.bincount(bins, minlength=1 << q.r)
    uniform_p = float(stats.chisquare(occupancy).pvalue)
    if np.ptp(bins) == 0:
        corr, corr_p = 0.0, 1.0
    else:
        res = stats.pearsonr(bins[:-1], bins[1:])
        corr, corr_p = float(res.statistic), float(res.pvalue)
    return {
        "clamped_fraction": clamped,
        "uniform_chi2_p": uniform_p,
        "successive_corr": corr,
        "uncorrelated_p": corr_p,
    }
