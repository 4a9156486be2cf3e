"""KDE likelihood, uniform priors, and multi-chain random-walk Metropolis-Hastings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from calibench._kernels import gauss_transform_log_sorted, order_statistics
from calibench.models import ParamVector, as_matrix
from calibench.msm import DegenerateSeriesError
from calibench.optimize import lhs_unit

LOG_FLOOR = math.log(1e-300)
DENSITY_FLOOR = 1e-300
TRUNCATION_RADIUS = 8.0
TAYLOR_ORDER = 20


def _quartiles(x: np.ndarray) -> tuple[float, float]:
    """25th and 75th percentiles with linear interpolation."""
    n = x.size
    pos = np.array([0.25, 0.75]) * (n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    v = order_statistics(x, np.concatenate([lo, hi]))
    q = v[:2] + (pos - lo) * (v[2:] - v[:2])
    return float(q[0]), float(q[1])


def silverman_bandwidth(pool: np.ndarray) -> float:
    x = np.asarray(pool, dtype=float).ravel()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    if not sd > 0:
        raise DegenerateSeriesError("zero-variance pool")
    q25, q75 = _quartiles(x)
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


class GaussianKDE:
    """Gaussian kernel density estimate over a pooled sample.

    The default evaluation truncates each kernel at ``TRUNCATION_RADIUS``
    bandwidths and sums nearby pool points through per-box Taylor expansions;
    ``exact=True`` sums every kernel directly.  Densities below 1e-300 are
    floored and counted in ``n_floored``.
    """

    def __init__(self, pool, bandwidth: float | str = "auto"):
        self.pool = np.ascontiguousarray(np.asarray(pool, dtype=float).ravel())
        if self.pool.size == 0:
            raise ValueError("empty pool")
        if bandwidth == "auto":
            self.bandwidth = silverman_bandwidth(self.pool)
        else:
            self.bandwidth = float(bandwidth)
            if not self.bandwidth > 0:
                raise ValueError("bandwidth must be positive")
        self.n_floored = 0

    def log_density(self, x, exact: bool = False) -> np.ndarray:
        q = np.ascontiguousarray(np.atleast_1d(np.asarray(x, dtype=float)))
        if exact:
            out = self._exact(q)
            floored = out < LOG_FLOOR
            out[floored] = LOG_FLOOR
            self.n_floored = int(floored.sum())
            return out
        out, self.n_floored = gauss_transform_log_sorted(
            q, self.pool, self.bandwidth, TRUNCATION_RADIUS, TAYLOR_ORDER, DENSITY_FLOOR
        )
        return out

    def _exact(self, q: np.ndarray, chunk: int = 256) -> np.ndarray:
        h = self.bandwidth
        norm = math.log(self.pool.size * h * math.sqrt(2 * math.pi))
        out = np.empty(q.size)
        for i in range(0, q.size, chunk):
            z = (q[i : i + chunk, None] - self.pool[None, :]) / h
            out[i : i + chunk] = logsumexp(-0.5 * z * z, axis=1) - norm
        return out

    def density(self, x, exact: bool = False) -> np.ndarray:
        return np.exp(self.log_density(x, exact=exact))


def kde_log_likelihood(real, ensemble, bandwidth: float | str = "auto", exact: bool = False) -> float:
    """Sum of log KDE densities of the real observations under the pooled ensemble."""
    pool = as_matrix(ensemble).ravel()
    kde = GaussianKDE(pool, bandwidth)
    return float(kde.log_density(np.asarray(real, dtype=float), exact=exact).sum())


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform priors on a box."""

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def from_space(cls, space: ParamVector) -> "PriorSpec":
        return cls(space.names, space.lower, space.upper)

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.upper - self.lower)))

    def contains(self, theta) -> bool:
        t = np.asarray(theta, dtype=float)
        return bool(np.all(t >= self.lower) and np.all(t <= self.upper))

    def log_density(self, theta) -> float:
        return -self.log_volume if self.contains(theta) else -math.inf


def log_posterior(theta, prior: PriorSpec, log_likelihood: Callable[[np.ndarray], float]) -> float:
    """Unnormalised log posterior; -inf outside the prior box (no simulation there)."""
    t = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    lp = prior.log_density(t)
    if lp == -math.inf:
        return -math.inf
    return lp + float(log_likelihood(t))


@dataclass
class PosteriorSample:
    chains: list[np.ndarray]
    burn_in: int
    acceptance: list[float]
    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    log_target: list[np.ndarray] = field(default_factory=list)

    @property
    def failed(self) -> list[bool]:
        return [a == 0.0 for a in self.acceptance]

    def retained(self) -> np.ndarray:
        return np.vstack([c[self.burn_in :] for c in self.chains])


def mh_sample(
    target: Callable[[np.ndarray], float],
    prior: PriorSpec,
    chains: int = 4,
    n_per_chain: int = 5000,
    burn_in: int = 1500,
    proposal_scale: Sequence[float] | float | None = None,
    seed: int = 0,
    starts: np.ndarray | None = None,
) -> PosteriorSample:
    """Independent Gaussian random-walk chains started from a latin hypercube.

    Each chain records ``n_per_chain`` states (one per proposal); the first
    ``burn_in`` of each are dropped by :meth:`PosteriorSample.retained`.
    ``proposal_scale`` defaults to 2.5% of each prior range.
    """
    if n_per_chain <= burn_in:
        raise ValueError("n_per_chain must exceed burn_in")
    d = len(prior.names)
    span = prior.upper - prior.lower
    if proposal_scale is None:
        scale = 0.025 * span
    else:
        scale = np.broadcast_to(np.asarray(proposal_scale, dtype=float), (d,)).copy()
    ss = np.random.SeedSequence(seed)
    start_rng, *chain_seeds = [np.random.Generator(np.random.Philox(s)) for s in ss.spawn(chains + 1)]
    if starts is None:
        starts = prior.lower + lhs_unit(chains, d, start_rng) * span
    out_chains, out_logp, acc = [], [], []
    for c in range(chains):
        rng = chain_seeds[c]
        x = np.array(starts[c], dtype=float)
        lp = target(x)
        draws = np.empty((n_per_chain, d))
        lps = np.empty(n_per_chain)
        accepted = 0
        for i in range(n_per_chain):
            prop = x + scale * rng.standard_normal(d)
            u = rng.random()
            lp_prop = target(prop) if prior.contains(prop) else -math.inf
            if lp_prop > -math.inf and (lp_prop >= lp or math.log(u) < lp_prop - lp):
                x, lp = prop, lp_prop
                accepted += 1
            draws[i] = x
            lps[i] = lp
        out_chains.append(draws)
        out_logp.append(lps)
        acc.append(accepted / n_per_chain)
    return PosteriorSample(out_chains, burn_in, acc, prior.names, prior.lower, prior.upper, out_logp)


def posterior_mean(s: PosteriorSample) -> ParamVector:
    draws = s.retained()
    if draws.shape[0] == 0:
        raise ValueError("no retained draws")
    mean = draws.mean(axis=0)
    mean = np.clip(mean, s.lower, s.upper)
    return ParamVector.build(zip(s.names, mean, s.lower, s.upper))
