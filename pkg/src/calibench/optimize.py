"""Derivative-free minimisers: particle swarm and LHS + RBF surrogate (CORS)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from calibench.models import ParamVector

log = logging.getLogger(__name__)


class ObjectiveEvaluationError(RuntimeError):
    """The objective raised; carries the parameter vector that triggered it."""

    def __init__(self, theta: np.ndarray, cause: BaseException):
        self.theta = np.array(theta, dtype=float)
        super().__init__(f"objective failed at theta={self.theta.tolist()}: {cause!r}")


class BudgetExhausted(RuntimeError):
    pass


class ObjectiveHandle:
    """Bounded objective with an append-only evaluation log."""

    def __init__(self, evaluator: Callable[[np.ndarray], float], space: ParamVector, budget: int | None = None):
        self.evaluator = evaluator
        self.space = space
        self.lower = space.lower
        self.upper = space.upper
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("bounds must be finite")
        self.budget = budget
        self.log: list[tuple[np.ndarray, float]] = []

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def n_evals(self) -> int:
        return len(self.log)

    def __call__(self, theta) -> float:
        theta = np.array(theta, dtype=float)
        if np.any(theta < self.lower) or np.any(theta > self.upper):
            raise ValueError(f"theta={theta.tolist()} outside bounds")
        if self.budget is not None and self.n_evals >= self.budget:
            raise BudgetExhausted(f"evaluation budget of {self.budget} reached")
        try:
            value = float(self.evaluator(theta))
        except Exception as exc:
            raise ObjectiveEvaluationError(theta, exc) from exc
        if np.isnan(value):
            raise ObjectiveEvaluationError(theta, ValueError("objective returned NaN"))
        self.log.append((theta, value))
        return value

    def best(self) -> tuple[np.ndarray, float]:
        i = int(np.argmin([v for _, v in self.log]))
        return self.log[i][0].copy(), self.log[i][1]


@dataclass
class OptimizeResult:
    x: ParamVector
    fun: float
    n_evals: int
    history: list[float] = field(default_factory=list)


def _result(f: ObjectiveHandle, history: list[float]) -> OptimizeResult:
    theta, value = f.best()
    return OptimizeResult(f.space.with_values(theta), value, f.n_evals, history)


# --------------------------------------------------------------------------
# particle swarm


@dataclass
class SwarmConfig:
    swarm_size: int = 30
    inertia: float = 0.729
    c1: float = 1.49445
    c2: float = 1.49445
    budget: int | None = None
    stall_iters: int = 25
    ftol: float = 1e-8
    xtol: float = 1e-4

    def budget_for(self, dim: int) -> int:
        if self.budget is not None:
            return self.budget
        return 3000 if dim <= 2 else 6000


def _reflect(x: np.ndarray, v: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> None:
    below = x < lo
    x[below] = 2 * lo[np.nonzero(below)[1]] - x[below]
    v[below] = -v[below]
    above = x > hi
    x[above] = 2 * hi[np.nonzero(above)[1]] - x[above]
    v[above] = -v[above]
    np.clip(x, lo, hi, out=x)


def pso_minimize(f: ObjectiveHandle, config: SwarmConfig | None = None, seed: int = 0) -> OptimizeResult:
    """Constriction-coefficient particle swarm with reflecting walls.

    Stops at the evaluation budget, when the swarm has collapsed onto the
    global best, or when the global best has not improved for
    ``stall_iters`` iterations.
    """
    cfg = config or SwarmConfig()
    budget = cfg.budget_for(f.dim)
    n = cfg.swarm_size
    if budget < n:
        raise ValueError(f"budget {budget} is smaller than the swarm ({n})")
    rng = np.random.Generator(np.random.Philox(seed))
    lo, hi = f.lower, f.upper
    span = hi - lo
    x = lo + rng.random((n, f.dim)) * span
    v = (lo + rng.random((n, f.dim)) * span - x) / 2.0
    fx = np.array([f(p) for p in x])
    pbest, pbest_f = x.copy(), fx.copy()
    g = int(np.argmin(pbest_f))
    gbest, gbest_f = pbest[g].copy(), pbest_f[g]
    history = [gbest_f]
    stall = 0
    while f.n_evals < budget:
        r1 = rng.random((n, f.dim))
        r2 = rng.random((n, f.dim))
        v = cfg.inertia * v + cfg.c1 * r1 * (pbest - x) + cfg.c2 * r2 * (gbest - x)
        np.clip(v, -span, span, out=v)
        x = x + v
        _reflect(x, v, lo, hi)
        active = min(n, budget - f.n_evals)
        for i in range(active):
            fi = f(x[i])
            if fi < pbest_f[i]:
                pbest[i], pbest_f[i] = x[i], fi
        g = int(np.argmin(pbest_f))
        improved = gbest_f - pbest_f[g]
        if pbest_f[g] < gbest_f:
            gbest, gbest_f = pbest[g].copy(), pbest_f[g]
        history.append(gbest_f)
        stall = stall + 1 if improved <= cfg.ftol * (1.0 + abs(gbest_f)) else 0
        spread = np.max(np.abs(x - gbest) / np.where(span > 0, span, 1.0))
        if stall >= cfg.stall_iters or spread < cfg.xtol:
            break
    return _result(f, history)


# --------------------------------------------------------------------------
# latin hypercube


def lhs_unit(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """n points in [0, 1)^d with exactly one point per stratum on every axis."""
    if n < 1:
        raise ValueError("need at least one point")
    strata = np.argsort(rng.random((d, n)), axis=1).T
    return (strata + rng.random((n, d))) / n


def lhs_sample(space: ParamVector, n: int, seed: int = 0) -> list[ParamVector]:
    if n < 2:
        raise ValueError("latin hypercube needs n >= 2")
    rng = np.random.Generator(np.random.Philox(seed))
    U = lhs_unit(n, len(space), rng)
    X = space.lower + U * (space.upper - space.lower)
    return [space.with_values(row) for row in X]


# --------------------------------------------------------------------------
# cubic RBF surrogate


class Surrogate:
    """Cubic radial basis interpolant with a linear polynomial tail."""

    def __init__(self, centers, values, jitter: float = 1e-10):
        X = np.atleast_2d(np.asarray(centers, dtype=float))
        y = np.asarray(values, dtype=float)
        n, d = X.shape
        if n < d + 1:
            raise ValueError(f"need at least {d + 1} centres for a linear tail in {d} dimensions")
        scale = np.ptp(X, axis=0)
        scale[scale == 0] = 1.0
        for attempt in range(3):
            if len(np.unique(X, axis=0)) < n:
                X = self._jitter(X, jitter * scale, attempt)
                continue
            try:
                self._fit(X, y)
                break
            except np.linalg.LinAlgError:
                X = self._jitter(X, jitter * scale, attempt)
        else:
            raise np.linalg.LinAlgError("RBF system singular after jittering")
        self.centers = X
        self.values = y

    @staticmethod
    def _jitter(X: np.ndarray, step: np.ndarray, attempt: int) -> np.ndarray:
        X = X.copy()
        _, first = np.unique(X, axis=0, return_index=True)
        dup = np.setdiff1d(np.arange(len(X)), first)
        offsets = (np.arange(1, dup.size + 1)[:, None]) * step * (attempt + 1)
        X[dup] += offsets
        return X

    def _fit(self, X: np.ndarray, y: np.ndarray) -> None:
        n, d = X.shape
        Phi = _pairwise(X, X) ** 3
        P = np.hstack([np.ones((n, 1)), X])
        A = np.zeros((n + d + 1, n + d + 1))
        A[:n, :n] = Phi
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.concatenate([y, np.zeros(d + 1)])
        sol = np.linalg.solve(A, rhs)
        self.weights = sol[:n]
        self.tail = sol[n:]
        self._X = X

    def __call__(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        Q = np.atleast_2d(x)
        out = (_pairwise(Q, self._X) ** 3) @ self.weights + self.tail[0] + Q @ self.tail[1:]
        return float(out[0]) if x.ndim == 1 else out

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        diff = x - self._X
        r = np.sqrt((diff * diff).sum(axis=1))
        return 3.0 * (self.weights * r) @ diff + self.tail[1:]


def _pairwise(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(d2, 0.0))


# --------------------------------------------------------------------------
# CORS


@dataclass
class CORSConfig:
    init_per_dim: int = 10
    budget_per_dim: int = 50
    budget: int | None = None
    betas: tuple[float, ...] = (0.9, 0.75, 0.5, 0.25, 0.05, 0.005, 0.0)
    n_starts: int = 100
    n_refine: int = 5
    n_maximin: int = 2000
    min_separation: float = 1e-4

    def budget_for(self, dim: int) -> int:
        return self.budget if self.budget is not None else self.budget_per_dim * dim


def _fit_values(y: np.ndarray) -> np.ndarray:
    """Replace failures by the worst finite value and cap large values at the median."""
    y = np.array(y, dtype=float)
    finite = np.isfinite(y)
    if not finite.any():
        return np.zeros_like(y)
    y[~finite] = y[finite].max()
    med = np.median(y)
    return np.minimum(y, med) if y.size > 2 else y


def _min_dist(Q: np.ndarray, X: np.ndarray) -> np.ndarray:
    return _pairwise(Q, X).min(axis=1)


def _inner_minimize(s: Surrogate, X: np.ndarray, radius: float, rng: np.random.Generator, cfg: CORSConfig):
    d = X.shape[1]
    starts = rng.random((cfg.n_starts, d))
    dist = _min_dist(starts, X)
    vals = s(starts)
    feasible = dist >= radius
    # rank feasible starts first, then by surrogate value
    order = np.lexsort((vals, ~feasible))
    best_u, best_v = None, np.inf
    if feasible.any():
        i = order[0]
        best_u, best_v = starts[i].copy(), vals[i]

    def cons(u):
        diff = u - X
        return (diff * diff).sum(axis=1) - radius * radius

    def cons_jac(u):
        return 2.0 * (u - X)

    constraints = [{"type": "ineq", "fun": cons, "jac": cons_jac}]
    for i in order[: cfg.n_refine]:
        res = minimize(
            s,
            starts[i],
            jac=s.gradient,
            method="SLSQP",
            bounds=[(0.0, 1.0)] * d,
            constraints=constraints,
            options={"maxiter": 100, "ftol": 1e-12},
        )
        u = np.clip(res.x, 0.0, 1.0)
        if _min_dist(u[None, :], X)[0] >= radius * (1 - 1e-9) and s(u) < best_v:
            best_u, best_v = u, s(u)
    if best_u is None:
        # nothing feasible: take the most isolated start
        best_u = starts[int(np.argmax(dist))]
    return best_u


def cors_minimize(f: ObjectiveHandle, config: CORSConfig | None = None, seed: int = 0) -> OptimizeResult:
    """Latin hypercube design followed by distance-constrained surrogate minimisation."""
    cfg = config or CORSConfig()
    d = f.dim
    budget = cfg.budget_for(d)
    n0 = max(cfg.init_per_dim * d, d + 2)
    if budget <= n0:
        raise ValueError(f"budget {budget} must exceed the initial design size {n0}")
    rng = np.random.Generator(np.random.Philox(seed))
    lo, span = f.lower, f.upper - f.lower

    def to_x(u):
        return lo + u * span

    U = lhs_unit(n0, d, rng)
    y = [f(to_x(u)) for u in U]
    history = [float(np.min(y))]
    k = 0
    while f.n_evals < budget:
        beta = cfg.betas[k % len(cfg.betas)]
        k += 1
        s = Surrogate(U, _fit_values(np.array(y)))
        probe = rng.random((cfg.n_maximin, d))
        delta = float(_min_dist(probe, U).max())
        radius = max(beta * delta, cfg.min_separation)
        u = _inner_minimize(s, U, radius, rng, cfg)
        y.append(f(to_x(u)))
        U = np.vstack([U, u])
        history.append(min(history[-1], y[-1]))
    return _result(f, history)
