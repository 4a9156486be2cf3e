"""Seeded simulators for the four benchmark data-generating processes.

Every simulator has two layers: a vectorised ``*_paths`` function that maps a
matrix of standard-normal draws (one row per replication) to a matrix of
series, and a public ``simulate_*`` wrapper that consumes a :class:`NoiseSource`
and returns a :class:`SimOutput`.  The harness uses the matrix layer directly so
that the noise for a fixed seed set can be drawn once and reused for every
parameter value (common random numbers).

Gaussian deviates come from NumPy's ziggurat sampler driven by the Philox4x64
counter-based bit generator, one independent stream per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

from calibench._kernels import bh_paths

BURN_IN = 100


class BoundsError(ValueError):
    """A parameter value lies outside its admissible interval."""


class NoiseExhausted(RuntimeError):
    """An injected noise sequence ran out of values."""


class SimulationError(RuntimeError):
    """A simulation produced non-finite output."""


class SeriesTooShort(ValueError):
    pass


# --------------------------------------------------------------------------
# parameter vectors


@dataclass(frozen=True)
class Param:
    name: str
    value: float
    lower: float
    upper: float


@dataclass(frozen=True)
class ParamVector:
    """Ordered, named, bounded parameter vector."""

    entries: tuple[Param, ...]

    def __post_init__(self):
        names = [p.name for p in self.entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        for p in self.entries:
            if not p.lower <= p.upper:
                raise ValueError(f"{p.name}: lower bound {p.lower} exceeds upper bound {p.upper}")
            if not p.lower <= p.value <= p.upper:
                raise BoundsError(f"{p.name}={p.value} outside [{p.lower}, {p.upper}]")

    @classmethod
    def build(cls, spec: Iterable[tuple[str, float, float, float]]) -> "ParamVector":
        return cls(tuple(Param(n, float(v), float(lo), float(hi)) for n, v, lo, hi in spec))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.entries], dtype=float)

    @property
    def lower(self) -> np.ndarray:
        return np.array([p.lower for p in self.entries], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([p.upper for p in self.entries], dtype=float)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> float:
        for p in self.entries:
            if p.name == name:
                return p.value
        raise KeyError(name)

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def as_dict(self) -> dict[str, float]:
        return {p.name: p.value for p in self.entries}

    def with_values(self, values: Mapping[str, float] | Sequence[float] | np.ndarray) -> "ParamVector":
        """Return a copy with some (mapping) or all (sequence) values replaced."""
        if isinstance(values, Mapping):
            unknown = set(values) - set(self.names)
            if unknown:
                raise KeyError(f"unknown parameters {sorted(unknown)}")
            new = tuple(replace(p, value=float(values.get(p.name, p.value))) for p in self.entries)
        else:
            arr = np.asarray(values, dtype=float)
            if arr.shape != (len(self),):
                raise ValueError(f"expected {len(self)} values, got shape {arr.shape}")
            new = tuple(replace(p, value=float(v)) for p, v in zip(self.entries, arr))
        return ParamVector(new)

    def with_bounds(self, bounds: Mapping[str, tuple[float, float]]) -> "ParamVector":
        new = []
        for p in self.entries:
            if p.name in bounds:
                lo, hi = bounds[p.name]
                p = replace(p, lower=float(lo), upper=float(hi))
            new.append(p)
        return ParamVector(tuple(new))

    def subset(self, names: Sequence[str]) -> "ParamVector":
        lookup = {p.name: p for p in self.entries}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"unknown parameters {missing}")
        return ParamVector(tuple(lookup[n] for n in names))


# --------------------------------------------------------------------------
# noise


class NoiseSource:
    """Either a seeded Gaussian stream or a replayed, finite sequence."""

    def __init__(self, seed: int | None = None, values: Sequence[float] | None = None):
        if (seed is None) == (values is None):
            raise ValueError("give exactly one of seed or values")
        self.seed = seed
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._pos = 0
        self._rng = None if seed is None else np.random.Generator(np.random.Philox(seed))

    @classmethod
    def seeded(cls, seed: int) -> "NoiseSource":
        return cls(seed=int(seed))

    @classmethod
    def injected(cls, values: Sequence[float]) -> "NoiseSource":
        return cls(values=values)

    @property
    def kind(self) -> str:
        return "seeded-gaussian" if self._rng is not None else "injected"

    def draw(self, n: int) -> np.ndarray:
        if self._rng is not None:
            return self._rng.standard_normal(n)
        if self._pos + n > self._values.size:
            raise NoiseExhausted(
                f"requested {n} draws but only {self._values.size - self._pos} injected values remain"
            )
        out = self._values[self._pos : self._pos + n].copy()
        self._pos += n
        return out


def gaussian_block(seeds: Sequence[int], n: int) -> np.ndarray:
    """One row of ``n`` standard-normal draws per seed."""
    out = np.empty((len(seeds), n))
    for i, s in enumerate(seeds):
        out[i] = NoiseSource.seeded(s).draw(n)
    return out


# --------------------------------------------------------------------------
# outputs


@dataclass(frozen=True)
class SimOutput:
    """A simulated series plus provenance.

    ``T`` counts raw simulated steps; ``len(values)`` equals ``T`` minus the
    shortening of every entry in ``transforms``.
    """

    values: np.ndarray
    model: str
    params: ParamVector
    seed: int | None
    T: int
    transforms: tuple[tuple, ...] = ()
    diagnostics: Mapping = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class SeriesEnsemble:
    """R replications stored row-wise, all of equal length."""

    values: np.ndarray
    seeds: tuple[int, ...] = ()
    transforms: tuple[tuple, ...] = ()

    @property
    def R(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[0]


def as_matrix(ensemble) -> np.ndarray:
    """Accept a SeriesEnsemble, a 2-D array, or a list of equal-length series."""
    if isinstance(ensemble, SeriesEnsemble):
        return ensemble.values
    arr = np.asarray(ensemble, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError("ensemble must be two-dimensional (replications x time)")
    return arr


def transform_shortening(transforms: Iterable[tuple]) -> int:
    total = 0
    for tr in transforms:
        if tr[0] == "first_difference":
            total += 1
        elif tr[0] == "drop_burn_in":
            total += int(tr[1])
        else:
            raise ValueError(f"unknown transform {tr!r}")
    return total


# --------------------------------------------------------------------------
# path kernels: z is (n_series, n_draws) standard normal


def _check(params: ParamVector, required: Sequence[str]) -> None:
    missing = [n for n in required if n not in params]
    if missing:
        raise KeyError(f"missing parameters {missing}")


def ar1_paths(a1: float, z: np.ndarray) -> np.ndarray:
    return lfilter([1.0], [1.0, -a1], z, axis=-1)


def arma_arch_paths(p: Mapping[str, float], z: np.ndarray, burn_in: int = BURN_IN) -> np.ndarray:
    n_series, n = z.shape
    # two leading zeros hold eps_{-1}, eps_0
    eps = np.zeros((n_series, n + 2))
    eps[:, 2:] = z
    sig2 = np.empty_like(eps)
    sig2[:, :2] = p["c0"]
    sig2[:, 2:] = p["c0"] + p["c1"] * eps[:, 1:-1] ** 2 + p["c2"] * eps[:, :-2] ** 2
    shock = np.sqrt(sig2) * eps
    u = p["a0"] + p["b1"] * shock[:, 1:-1] + p["b2"] * shock[:, :-2] + shock[:, 2:]
    x = lfilter([1.0], [1.0, -p["a1"], -p["a2"]], u, axis=-1)
    return x[:, burn_in:]


def rw_break_paths(p: Mapping[str, float], z: np.ndarray) -> np.ndarray:
    """Levels x_0..x_{n}; z supplies the n innovations."""
    n_series, n = z.shape
    tau = int(np.floor(p["tau"] + 0.5))
    t = np.arange(1, n + 1)
    pre = t <= tau
    drift = np.where(pre, p["d1"], p["d2"])
    scale = np.where(pre, p["sigma1"], p["sigma2"])
    x = np.zeros((n_series, n + 1))
    np.cumsum(drift + scale * z, axis=1, out=x[:, 1:])
    return x


BH_NAMES = ("g1", "b1", "g2", "b2", "g3", "b3", "g4", "b4", "r", "beta")


def bh_paths_from_params(
    p: Mapping[str, float],
    z: np.ndarray,
    sigma_eps: float,
    burn_in: int = BURN_IN,
    fractions: np.ndarray | None = None,
) -> np.ndarray:
    g = np.array([p["g1"], p["g2"], p["g3"], p["g4"]], dtype=float)
    b = np.array([p["b1"], p["b2"], p["b3"], p["b4"]], dtype=float)
    buf = np.empty((0, 4)) if fractions is None else fractions
    x = bh_paths(g, b, 1.0 + p["r"], float(p["beta"]), float(sigma_eps), np.ascontiguousarray(z, dtype=float), buf)
    return x[:, 3 + burn_in :]


# --------------------------------------------------------------------------
# model registry


@dataclass(frozen=True)
class ModelDef:
    name: str
    param_names: tuple[str, ...]
    n_draws: Callable[[int], int]
    paths: Callable[..., np.ndarray]
    burn_in: int = 0
    difference: bool = False


def _ar1(p, z, **_):
    return ar1_paths(p["a1"], z)


def _arma(p, z, **_):
    return arma_arch_paths(p, z)


def _rw(p, z, **_):
    return rw_break_paths(p, z)


def _bh(p, z, sigma_eps=0.01, **_):
    return bh_paths_from_params(p, z, sigma_eps)


MODELS: dict[str, ModelDef] = {
    "ar1": ModelDef("ar1", ("a1",), lambda T: T, _ar1),
    "arma_arch": ModelDef(
        "arma_arch", ("a0", "a1", "a2", "b1", "b2", "c0", "c1", "c2"), lambda T: T + BURN_IN, _arma, burn_in=BURN_IN
    ),
    "rw_break": ModelDef("rw_break", ("tau", "sigma1", "sigma2", "d1", "d2"), lambda T: T - 1, _rw, difference=True),
    "brock_hommes": ModelDef("brock_hommes", BH_NAMES, lambda T: T + BURN_IN, _bh, burn_in=BURN_IN),
}


def get_model(name: str) -> ModelDef:
    try:
        return MODELS[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


def simulate_paths(model: str, params: Mapping[str, float], z: np.ndarray, **opts) -> np.ndarray:
    """Raw model output for each row of standard-normal draws ``z``.

    No stationarity transform is applied here; see :func:`first_difference`.
    Raises :class:`SimulationError` when the output is not finite.
    """
    out = get_model(model).paths(params, np.atleast_2d(z), **opts)
    if not np.all(np.isfinite(out)):
        raise SimulationError(f"{model}: non-finite output at {dict(params)}")
    return out


# --------------------------------------------------------------------------
# public single-series simulators


def _require_T(T: int) -> None:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")


def simulate_ar1(params: ParamVector, T: int, noise: NoiseSource) -> SimOutput:
    _check(params, ["a1"])
    _require_T(T)
    a1 = params["a1"]
    if not 0.0 <= a1 <= 1.0:
        raise BoundsError(f"a1={a1} outside [0, 1]")
    x = ar1_paths(a1, noise.draw(T)[None, :])[0]
    return SimOutput(x, "ar1", params, noise.seed, T)


def simulate_arma_arch(params: ParamVector, T: int, noise: NoiseSource) -> SimOutput:
    names = MODELS["arma_arch"].param_names
    _check(params, names)
    _require_T(T)
    p = params.as_dict()
    for n in names:
        hi = 0.8 if n == "a1" else 1.0
        if not 0.0 <= p[n] <= hi:
            raise BoundsError(f"{n}={p[n]} outside [0, {hi}]")
    x = arma_arch_paths(p, noise.draw(T + BURN_IN)[None, :])[0]
    return SimOutput(x, "arma_arch", params, noise.seed, T + BURN_IN, (("drop_burn_in", BURN_IN),))


def simulate_rw_break(params: ParamVector, T: int, noise: NoiseSource) -> SimOutput:
    _check(params, MODELS["rw_break"].param_names)
    _require_T(T)
    p = params.as_dict()
    if not 0.0 <= p["tau"] <= T:
        raise BoundsError(f"tau={p['tau']} outside [0, {T}]")
    for n in ("sigma1", "sigma2"):
        if p[n] < 0:
            raise BoundsError(f"{n}={p[n]} must be non-negative")
    x = rw_break_paths(p, noise.draw(T - 1)[None, :])[0]
    return SimOutput(x, "rw_break", params, noise.seed, T)


def simulate_brock_hommes(
    params: ParamVector, T: int, noise: NoiseSource, sigma_eps: float = 0.01, *, fractions: np.ndarray | None = None
) -> SimOutput:
    """Brock-Hommes asset pricing model with four strategies.

    If ``fractions`` is an array of shape (T + 100, 4) it receives the strategy
    fractions n_{h,t} for t = 3, ..., including the burn-in period.
    """
    _check(params, BH_NAMES)
    _require_T(T)
    if sigma_eps <= 0:
        raise ValueError("sigma_eps must be positive")
    p = params.as_dict()
    if p["r"] <= 0:
        raise BoundsError(f"r={p['r']} must be positive")
    if p["beta"] < 0:
        raise BoundsError(f"beta={p['beta']} must be non-negative")
    x = bh_paths_from_params(p, noise.draw(T + BURN_IN)[None, :], sigma_eps, fractions=fractions)[0]
    if not np.all(np.isfinite(x)):
        raise SimulationError(f"brock_hommes: non-finite output at {p}")
    return SimOutput(x, "brock_hommes", params, noise.seed, T + BURN_IN, (("drop_burn_in", BURN_IN),))


SIMULATORS = {
    "ar1": simulate_ar1,
    "arma_arch": simulate_arma_arch,
    "rw_break": simulate_rw_break,
    "brock_hommes": simulate_brock_hommes,
}


def first_difference(s: SimOutput) -> SimOutput:
    if len(s.values) < 2:
        raise SeriesTooShort("first difference needs at least two observations")
    return replace(s, values=np.diff(s.values), transforms=s.transforms + (("first_difference",),))
