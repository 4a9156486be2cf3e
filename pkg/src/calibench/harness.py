"""Experiment protocol: truth data, common random numbers, method runs, losses, reports.

An experiment simulates "real" data from known parameters with a truth seed,
then asks every calibration method to recover the free parameters from an
ensemble simulated with a disjoint, fixed block of seeds.  Because the noise
block never changes within an experiment, every criterion is a deterministic
function of the parameters.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from calibench import bayes, diagnostics, gsl_div, mic, msm, optimize
from calibench.models import (
    MODELS,
    SIMULATORS,
    NoiseSource,
    Param,
    ParamVector,
    SimOutput,
    SimulationError,
    first_difference,
    gaussian_block,
    get_model,
    simulate_paths,
)

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


class SeedDisciplineError(ConfigError):
    """The truth seed collides with an ensemble seed."""


# --------------------------------------------------------------------------
# methods and defaults

METHODS: dict[str, str] = {
    "gsl_div/pso": "GSL-div/PS",
    "gsl_div/cors": "GSL-div/KK",
    "msm/pso": "MSM/PS",
    "msm/cors": "MSM/KK",
    "mic/pso": "MIC/PS",
    "mic/cors": "MIC/KK",
    "bayes": "BE",
}
LABEL_TO_ID = {v: k for k, v in METHODS.items()}
CRITERIA = ("gsl_div", "msm", "mic")

# chains, draws per chain, burn-in
SCHEDULES: dict[str, tuple[int, int, int]] = {
    "simple": (4, 5000, 1500),
    "housing_1": (2, 5000, 1500),
    "housing_2": (2, 10000, 1500),
}

# admissible intervals used when a config does not give bounds
DEFAULT_BOUNDS: dict[str, dict[str, tuple[float, float]]] = {
    "ar1": {"a1": (0.0, 1.0)},
    "arma_arch": {
        "a0": (0.0, 1.0),
        "a1": (0.0, 0.8),
        "a2": (0.0, 1.0),
        "b1": (0.0, 1.0),
        "b2": (0.0, 1.0),
        "c0": (0.0, 1.0),
        "c1": (0.0, 1.0),
        "c2": (0.0, 1.0),
    },
    "rw_break": {"tau": (0.0, 1000.0), "sigma1": (0.0, 1.0), "sigma2": (0.0, 1.0), "d1": (0.0, 5.0), "d2": (0.0, 5.0)},
    "brock_hommes": {
        "g1": (0.0, 1.0),
        "b1": (0.0, 1.0),
        "g2": (0.0, 1.0),
        "b2": (0.0, 1.0),
        "g3": (0.0, 1.0),
        "b3": (-1.0, 0.0),
        "g4": (0.0, 1.0),
        "b4": (0.0, 1.0),
        "r": (0.0, 1.0),
        "beta": (0.0, 10.0),
    },
}

DEFAULTS: dict[str, Any] = {
    "model": {"name": "", "T_emp": 1000, "T_sim": 1000, "sigma_eps": 0.01},
    "truth": {
        "seed": 0,
        "params": {},
        "free": [],
        "bounds": {},
        "stationarity_windows": 20,
        "stationarity_alpha": 0.01,
    },
    "ensemble": {"base_seed": 1, "R_smd": 250, "R_bayes": 100, "common_random_numbers": True},
    "methods": {
        "run": list(METHODS),
        "gsl_div": {"b": 10, "L": 6},
        "msm": {"block_len": 25, "bootstrap": 2000, "seed": 0},
        "mic": {"lower": "auto", "upper": "auto", "r": "auto", "L": "auto"},
        "pso": {
            "swarm_size": 30,
            "inertia": 0.729,
            "c1": 1.49445,
            "c2": 1.49445,
            "budget": "auto",
            "stall_iters": 25,
            "ftol": 1e-8,
            "xtol": 1e-4,
            "seed": 0,
        },
        "cors": {
            "init_per_dim": 10,
            "budget_per_dim": 50,
            "n_starts": 100,
            "n_refine": 5,
            "n_maximin": 2000,
            "seed": 0,
        },
        "bayes": {
            "schedule": "simple",
            "chains": "auto",
            "n_per_chain": "auto",
            "burn_in": "auto",
            "proposal_fraction": 0.025,
            "bandwidth": "silverman",
            "exact_kde": False,
            "seed": 0,
            "ks_members": 50,
        },
    },
    "output": {"dir": "out"},
}


def _merge(base: dict, new: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in new.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with the value read as a TOML literal, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [k.strip() for k in key.strip().split(".")]
    if not all(path):
        raise ConfigError(f"override {text!r} has an empty key component")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides:
        path, value = parse_override(text)
        node = doc
        for k in path[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {k!r} is not a table")
            node = nxt
        node[path[-1]] = value
    return doc


def preset_names() -> list[str]:
    root = resources.files("calibench") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def read_config_document(source: str | os.PathLike) -> dict:
    """Parse a TOML file, or a built-in preset when ``source`` names one."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif str(source) in preset_names():
        text = (resources.files("calibench") / "presets" / f"{source}.toml").read_text()
    else:
        raise ConfigError(f"config {str(source)!r} is neither a file nor a preset ({', '.join(preset_names())})")
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


# --------------------------------------------------------------------------
# configuration


def _auto(value, default):
    return default if value == "auto" else value


def _int(section: dict, key: str, name: str, minimum: int = 0) -> int:
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v or v < minimum:
        raise ConfigError(f"{name}.{key} must be an integer >= {minimum}, got {v!r}")
    return int(v)


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    theta_true: ParamVector
    free: tuple[str, ...]
    T_emp: int
    T_sim: int
    R_smd: int
    R_bayes: int
    truth_seed: int
    base_seed: int
    methods: tuple[str, ...]
    document: dict = field(compare=False, repr=False)
    overrides: tuple[str, ...] = ()
    source: str = ""

    # ---- construction

    @classmethod
    def load(cls, source: str | os.PathLike, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        doc = read_config_document(source)
        return cls.from_document(doc, overrides, source=str(source))

    @classmethod
    def from_document(cls, doc: Mapping, overrides: Sequence[str] = (), source: str = "") -> "ExperimentConfig":
        merged = _merge(DEFAULTS, doc)
        merged = apply_overrides(merged, overrides)
        try:
            return cls._build(merged, tuple(overrides), source)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def _build(cls, doc: dict, overrides: tuple[str, ...], source: str) -> "ExperimentConfig":
        m = doc["model"]
        name = m["name"]
        if name not in MODELS:
            raise ConfigError(f"model.name must be one of {sorted(MODELS)}, got {name!r}")
        T_emp = _int(m, "T_emp", "model", 20)
        T_sim = _int(m, "T_sim", "model", 20)
        if not float(m["sigma_eps"]) > 0:
            raise ConfigError("model.sigma_eps must be positive")

        t = doc["truth"]
        values = dict(t["params"])
        names = MODELS[name].param_names
        missing = [n for n in names if n not in values]
        unknown = [n for n in values if n not in names]
        if missing or unknown:
            raise ConfigError(f"truth.params: missing {missing}, unknown {unknown}")
        free = tuple(t["free"])
        if not free:
            raise ConfigError("truth.free must name at least one parameter")
        if len(set(free)) != len(free) or any(n not in names for n in free):
            raise ConfigError(f"truth.free must be distinct names from {list(names)}, got {list(free)}")
        bounds = {k: tuple(v) for k, v in DEFAULT_BOUNDS[name].items()}
        if name == "rw_break":
            bounds["tau"] = (0.0, float(T_emp))
        for k, v in t["bounds"].items():
            if k not in names or len(v) != 2:
                raise ConfigError(f"truth.bounds.{k} must be a [lower, upper] pair for a model parameter")
            bounds[k] = (float(v[0]), float(v[1]))
        entries = []
        for n in names:
            val = float(values[n])
            lo, hi = bounds[n]
            if not lo < hi:
                raise ConfigError(f"bounds for {n} must satisfy lower < upper")
            if n in free:
                if not lo <= val <= hi:
                    raise ConfigError(f"true value {n}={val} lies outside its bounds [{lo}, {hi}]")
            else:
                # held fixed, so only needs to be representable
                lo, hi = min(lo, val), max(hi, val)
            entries.append(Param(n, val, lo, hi))
        theta = ParamVector(tuple(entries))
        _int(t, "stationarity_windows", "truth", 2)

        e = doc["ensemble"]
        R_smd = _int(e, "R_smd", "ensemble", 1)
        R_bayes = _int(e, "R_bayes", "ensemble", 1)
        truth_seed = _int(t, "seed", "truth", 0)
        base_seed = _int(e, "base_seed", "ensemble", 0)
        if e["common_random_numbers"] is not True:
            raise ConfigError("ensemble.common_random_numbers must be true; seeds are fixed per experiment")

        run = doc["methods"]["run"]
        if isinstance(run, str):
            run = [run]
        methods = []
        for r in run:
            mid = LABEL_TO_ID.get(r, r)
            if mid not in METHODS:
                raise ConfigError(f"unknown method {r!r}; choose from {list(METHODS)}")
            if mid in methods:
                raise ConfigError(f"method {r!r} listed twice")
            methods.append(mid)
        doc["methods"]["run"] = methods

        ms = doc["methods"]
        bs = ms["bayes"]
        if bs["schedule"] not in SCHEDULES:
            raise ConfigError(f"methods.bayes.schedule must be one of {list(SCHEDULES)}")
        chains, n_per, burn = SCHEDULES[bs["schedule"]]
        bs["chains"] = _auto(bs["chains"], chains)
        bs["n_per_chain"] = _auto(bs["n_per_chain"], n_per)
        bs["burn_in"] = _auto(bs["burn_in"], burn)
        _int(bs, "chains", "methods.bayes", 1)
        _int(bs, "n_per_chain", "methods.bayes", 2)
        _int(bs, "burn_in", "methods.bayes", 0)
        if bs["burn_in"] >= bs["n_per_chain"]:
            raise ConfigError("methods.bayes.burn_in must be smaller than n_per_chain")
        _int(bs, "ks_members", "methods.bayes", 1)
        if bs["bandwidth"] != "silverman" and not (
            isinstance(bs["bandwidth"], (int, float)) and bs["bandwidth"] > 0
        ):
            raise ConfigError("methods.bayes.bandwidth must be 'silverman' or a positive number")
        q = mic.TABLE9[name]
        mq = ms["mic"]
        mq["lower"] = float(_auto(mq["lower"], q.lower))
        mq["upper"] = float(_auto(mq["upper"], q.upper))
        mq["r"] = _auto(mq["r"], q.r)
        mq["L"] = _auto(mq["L"], q.L)
        try:
            mic.QuantizerSpec(mq["lower"], mq["upper"], int(mq["r"]), int(mq["L"]))
        except ValueError as exc:
            raise ConfigError(f"methods.mic: {exc}") from exc
        if (1 << (int(mq["r"]) * int(mq["L"]))) > (1 << 26):
            raise ConfigError("methods.mic: context depth r*L above 26 is not supported")
        _int(ms["gsl_div"], "b", "methods.gsl_div", 2)
        _int(ms["gsl_div"], "L", "methods.gsl_div", 1)
        _int(ms["msm"], "block_len", "methods.msm", 1)
        _int(ms["msm"], "bootstrap", "methods.msm", 2)
        ps = ms["pso"]
        if ps["budget"] != "auto":
            _int(ps, "budget", "methods.pso", ps["swarm_size"])

        cfg = cls(
            model=name,
            theta_true=theta,
            free=free,
            T_emp=T_emp,
            T_sim=T_sim,
            R_smd=R_smd,
            R_bayes=R_bayes,
            truth_seed=truth_seed,
            base_seed=base_seed,
            methods=tuple(methods),
            document=doc,
            overrides=overrides,
            source=source,
        )
        cfg.check_seeds()
        return cfg

    # ---- accessors

    def check_seeds(self) -> None:
        if self.truth_seed in self.ensemble_seeds(self.max_R):
            raise SeedDisciplineError(
                f"truth seed {self.truth_seed} lies in the ensemble seed range "
                f"[{self.base_seed}, {self.base_seed + self.max_R - 1}]"
            )

    @property
    def max_R(self) -> int:
        ks = int(self.document["methods"]["bayes"]["ks_members"])
        return max(self.R_smd, self.R_bayes, ks)

    def ensemble_seeds(self, R: int) -> range:
        return range(self.base_seed, self.base_seed + R)

    @property
    def free_space(self) -> ParamVector:
        return self.theta_true.subset(self.free)

    @property
    def output_dir(self) -> Path:
        return Path(self.document["output"]["dir"])

    def section(self, *path: str) -> dict:
        node = self.document
        for k in path:
            node = node[k]
        return node

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        doc = apply_overrides(self.document, overrides)
        return ExperimentConfig._build(doc, self.overrides + tuple(overrides), self.source)

    def echo(self) -> dict:
        """Full merged configuration including every default, plus the overrides applied."""
        doc = json.loads(json.dumps(self.document))
        doc["overrides"] = list(self.overrides)
        return doc


def load_config(source, overrides: Sequence[str] = ()) -> ExperimentConfig:
    return ExperimentConfig.load(source, overrides)


# --------------------------------------------------------------------------
# loss


def loss(theta_true: ParamVector, theta_hat: ParamVector) -> float:
    """Euclidean distance between two parameter vectors with identical names in identical order."""
    if theta_true.names != theta_hat.names:
        raise ValueError(f"parameter mismatch: {theta_true.names} vs {theta_hat.names}")
    return float(np.linalg.norm(theta_true.values - theta_hat.values))


# --------------------------------------------------------------------------
# truth data and the experiment context


def make_truth_data(config: ExperimentConfig) -> SimOutput:
    """Simulate the pseudo-real series at the true parameters with the truth seed."""
    config.check_seeds()
    opts = {}
    if config.model == "brock_hommes":
        opts["sigma_eps"] = float(config.section("model")["sigma_eps"])
    out = SIMULATORS[config.model](config.theta_true, config.T_emp, NoiseSource.seeded(config.truth_seed), **opts)
    if get_model(config.model).difference:
        out = first_difference(out)
    windows = int(config.section("truth")["stationarity_windows"])
    alpha = float(config.section("truth")["stationarity_alpha"])
    notes = []
    try:
        st = diagnostics.stationarity_runs_test(out.values, windows)
    except ValueError as exc:
        st = None
        notes.append(f"stationarity test not applicable: {exc}")
    if st is not None and st.p_value < alpha:
        msg = f"truth data fails the runs stationarity test (p={st.p_value:.4g} < {alpha})"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
    diag = {"stationarity": None if st is None else st.as_dict(), "warnings": notes}
    return SimOutput(out.values, out.model, out.params, out.seed, out.T, out.transforms, diag)


class Experiment:
    """Truth data plus the fixed noise block; builds deterministic criteria over the free parameters."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.model = get_model(config.model)
        self.truth = make_truth_data(config)
        self.real = self.truth.values
        seeds = config.ensemble_seeds(config.max_R)
        if config.truth_seed in seeds:  # pragma: no cover - guarded by config validation
            raise SeedDisciplineError("truth seed among ensemble seeds")
        self.seeds = tuple(seeds)
        self._z = gaussian_block(self.seeds, self.model.n_draws(config.T_sim))
        self._z.setflags(write=False)
        self._opts = {}
        if config.model == "brock_hommes":
            self._opts["sigma_eps"] = float(config.section("model")["sigma_eps"])
        self._weight = None

    @property
    def space(self) -> ParamVector:
        return self.config.free_space

    def with_real(self, values) -> "Experiment":
        """Copy sharing the noise block but comparing against other observed data."""
        other = copy.copy(self)
        other.real = np.asarray(values, dtype=float)
        other._weight = None
        return other

    def full_params(self, theta) -> dict[str, float]:
        p = self.config.theta_true.as_dict()
        values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
        for n, v in zip(self.config.free, values):
            p[n] = float(v)
        return p

    def ensemble(self, theta, R: int) -> np.ndarray:
        """R series at ``theta`` (free values) using ensemble seeds base..base+R-1."""
        if R > self._z.shape[0]:
            raise ValueError(f"only {self._z.shape[0]} ensemble seeds are prepared")
        X = simulate_paths(self.config.model, self.full_params(theta), self._z[:R], **self._opts)
        if self.model.difference:
            X = np.diff(X, axis=1)
        return X

    # ---- criteria (raw: may raise)

    def weight_matrix(self) -> msm.WeightMatrix:
        if self._weight is None:
            s = self.config.section("methods", "msm")
            self._weight = msm.estimate_weight_matrix(
                self.real, block_len=int(s["block_len"]), B=int(s["bootstrap"]), seed=int(s["seed"])
            )
        return self._weight

    def criterion(self, name: str) -> Callable[[np.ndarray], float]:
        """Fresh raw criterion over free-parameter arrays; lower is better except for ``bayes``."""
        R = self.config.R_smd
        if name == "msm":
            real_m = msm.compute_moments(self.real)
            W = self.weight_matrix().W
            return lambda th: msm.msm_objective(real_m, self.ensemble(th, R), W)
        if name == "gsl_div":
            s = self.config.section("methods", "gsl_div")
            ref = gsl_div.GSLReference(self.real, int(s["b"]), int(s["L"]))
            return lambda th: ref(self.ensemble(th, R))
        if name == "mic":
            ref = mic.MICReference(self.real, self.quantizer())
            return lambda th: ref(self.ensemble(th, R))
        if name == "bayes":
            return self.log_likelihood()
        raise ValueError(f"unknown criterion {name!r}")

    def quantizer(self) -> mic.QuantizerSpec:
        s = self.config.section("methods", "mic")
        return mic.QuantizerSpec(float(s["lower"]), float(s["upper"]), int(s["r"]), int(s["L"]))

    def log_likelihood(self) -> Callable[[np.ndarray], float]:
        s = self.config.section("methods", "bayes")
        bw = "auto" if s["bandwidth"] == "silverman" else float(s["bandwidth"])
        exact = bool(s["exact_kde"])
        R = self.config.R_bayes
        return lambda th: bayes.kde_log_likelihood(self.real, self.ensemble(th, R), bw, exact)

    def objective(self, name: str) -> Callable[[np.ndarray], float]:
        """Criterion with degenerate or diverging simulations mapped to +inf."""
        raw = self.criterion(name)

        def f(th):
            try:
                v = float(raw(th))
            except (msm.DegenerateSeriesError, SimulationError, FloatingPointError, np.linalg.LinAlgError):
                return math.inf
            return v if not math.isnan(v) else math.inf

        return f

    def log_target(self) -> Callable[[np.ndarray], float]:
        """KDE log-likelihood with failures mapped to -inf (the prior is added by the sampler)."""
        raw = self.log_likelihood()
        prior = bayes.PriorSpec.from_space(self.space)

        def f(th):
            try:
                return bayes.log_posterior(th, prior, raw)
            except (msm.DegenerateSeriesError, SimulationError, FloatingPointError):
                return -math.inf

        return f


# --------------------------------------------------------------------------
# reports


@dataclass
class MethodResult:
    method: str
    status: str
    estimate: dict[str, float] | None = None
    loss: float | None = None
    objective: float | None = None
    n_evals: int = 0
    wall_time: float = 0.0
    error: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return METHODS.get(self.method, self.method)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "label": self.label,
            "status": self.status,
            "estimate": self.estimate,
            "loss": self.loss,
            "objective": self.objective,
            "n_evals": self.n_evals,
            "wall_time": self.wall_time,
            "error": self.error,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MethodResult":
        return cls(
            d["method"],
            d["status"],
            d.get("estimate"),
            d.get("loss"),
            d.get("objective"),
            int(d.get("n_evals", 0)),
            float(d.get("wall_time", 0.0)),
            d.get("error"),
            dict(d.get("diagnostics") or {}),
        )


@dataclass
class Surface:
    criterion: str
    axes: tuple[str, ...]
    points: np.ndarray
    values: np.ndarray
    n_evals: int

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "axes": list(self.axes),
            "points": self.points.tolist(),
            "values": [None if not np.isfinite(v) else float(v) for v in self.values],
            "n_evals": self.n_evals,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Surface":
        vals = np.array([np.nan if v is None else v for v in d["values"]], dtype=float)
        pts = np.array(d["points"], dtype=float).reshape(len(vals), len(d["axes"]))
        return cls(d["criterion"], tuple(d["axes"]), pts, vals, int(d["n_evals"]))


@dataclass
class ExperimentReport:
    config: dict
    free: tuple[str, ...]
    theta_true: dict[str, float]
    truth: dict
    methods: list[MethodResult] = field(default_factory=list)
    posterior: dict | None = None
    ks_panel: list[dict] | None = None
    surfaces: dict[str, Surface] = field(default_factory=dict)
    wall_time: float = 0.0

    def row(self, method: str) -> MethodResult:
        mid = LABEL_TO_ID.get(method, method)
        for r in self.methods:
            if r.method == mid:
                return r
        raise KeyError(method)

    def check_consistency(self) -> None:
        """Every stored loss equals the loss recomputed from the stored estimates."""
        true = ParamVector(tuple(Param(n, self.theta_true[n], -math.inf, math.inf) for n in self.free))
        for r in self.methods:
            if r.status != "ok":
                continue
            hat = true.with_values([r.estimate[n] for n in self.free])
            if r.loss != loss(true, hat):
                raise ValueError(f"{r.label}: stored loss {r.loss} disagrees with recomputed {loss(true, hat)}")

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "config": self.config,
            "free": list(self.free),
            "theta_true": self.theta_true,
            "truth": self.truth,
            "methods": [r.to_dict() for r in self.methods],
            "posterior": self.posterior,
            "ks_panel": self.ks_panel,
            "surfaces": {k: s.to_dict() for k, s in self.surfaces.items()},
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentReport":
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(
            d["config"],
            tuple(d["free"]),
            dict(d["theta_true"]),
            d["truth"],
            [MethodResult.from_dict(m) for m in d["methods"]],
            d.get("posterior"),
            d.get("ks_panel"),
            {k: Surface.from_dict(s) for k, s in (d.get("surfaces") or {}).items()},
            float(d.get("wall_time", 0.0)),
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(report: ExperimentReport) -> str:
    return json.dumps(_jsonable(report.to_dict()), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def table_csv(report: ExperimentReport) -> str:
    """Method, one column per free parameter, loss.  No timing columns."""
    rows = []
    for r in report.methods:
        est = r.estimate or {}
        rows.append([r.label] + [est.get(n) for n in report.free] + [r.loss])
    return _csv_text(["method", *report.free, "loss"], rows)


def surface_csv(s: Surface) -> str:
    rows = [list(map(float, p)) + [None if not np.isfinite(v) else float(v)] for p, v in zip(s.points, s.values)]
    return _csv_text([*s.axes, "value"], rows)


def posterior_csv(report: ExperimentReport) -> str:
    p = report.posterior
    rows = [[c, i, *draw] for c, chain in enumerate(p["retained"]) for i, draw in enumerate(chain)]
    return _csv_text(["chain", "draw", *p["names"]], rows)


def ks_panel_csv(report: ExperimentReport) -> str:
    rows = [[k["seed"], k["statistic"], k["p_value"]] for k in report.ks_panel]
    return _csv_text(["seed", "statistic", "p_value"], rows)


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def export_report(report: ExperimentReport, path: str | os.PathLike, format: str = "json") -> list[Path]:
    """Write the report.

    ``json`` writes the full report to ``path``.  ``csv`` treats ``path`` as a
    directory and writes ``table.csv`` plus, when present,
    ``posterior_draws.csv``, ``ks_panel.csv`` and ``surface_<criterion>.csv``.
    """
    path = Path(path)
    if format == "json":
        return [_write(path, report_json(report))]
    if format != "csv":
        raise ValueError(f"unknown format {format!r}")
    written = [_write(path / "table.csv", table_csv(report))]
    if report.posterior is not None:
        written.append(_write(path / "posterior_draws.csv", posterior_csv(report)))
    if report.ks_panel is not None:
        written.append(_write(path / "ks_panel.csv", ks_panel_csv(report)))
    for name, s in report.surfaces.items():
        written.append(_write(path / f"surface_{name}.csv", surface_csv(s)))
    return written


def export_all(report: ExperimentReport, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    return export_report(report, out / "report.json", "json") + export_report(report, out, "csv")


def load_report(path: str | os.PathLike) -> ExperimentReport:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read report {path}: {exc}") from exc
    return ExperimentReport.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# running methods


def _swarm_config(s: Mapping) -> optimize.SwarmConfig:
    return optimize.SwarmConfig(
        swarm_size=int(s["swarm_size"]),
        inertia=float(s["inertia"]),
        c1=float(s["c1"]),
        c2=float(s["c2"]),
        budget=None if s["budget"] == "auto" else int(s["budget"]),
        stall_iters=int(s["stall_iters"]),
        ftol=float(s["ftol"]),
        xtol=float(s["xtol"]),
    )


def _cors_config(s: Mapping) -> optimize.CORSConfig:
    return optimize.CORSConfig(
        init_per_dim=int(s["init_per_dim"]),
        budget_per_dim=int(s["budget_per_dim"]),
        n_starts=int(s["n_starts"]),
        n_refine=int(s["n_refine"]),
        n_maximin=int(s["n_maximin"]),
    )


def _run_smd(exp: Experiment, method: str) -> MethodResult:
    crit, opt = method.split("/")
    handle = optimize.ObjectiveHandle(exp.objective(crit), exp.space)
    s = exp.config.section("methods", opt)
    if opt == "pso":
        res = optimize.pso_minimize(handle, _swarm_config(s), seed=int(s["seed"]))
    else:
        res = optimize.cors_minimize(handle, _cors_config(s), seed=int(s["seed"]))
    est = res.x
    diag = {"history_length": len(res.history)}
    if crit == "mic":
        diag["truth_clamped_fraction"] = mic.quantize_bins(exp.real, exp.quantizer())[1]
    return MethodResult(
        method,
        "ok",
        est.as_dict(),
        loss(exp.space, est),
        float(res.fun) if math.isfinite(res.fun) else None,
        res.n_evals,
        diagnostics=diag,
    )


def _run_bayes(exp: Experiment) -> tuple[MethodResult, dict, list[dict]]:
    s = exp.config.section("methods", "bayes")
    prior = bayes.PriorSpec.from_space(exp.space)
    target = exp.log_target()
    count = [0]

    def counted(th):
        count[0] += 1
        return target(th)

    sample = bayes.mh_sample(
        counted,
        prior,
        chains=int(s["chains"]),
        n_per_chain=int(s["n_per_chain"]),
        burn_in=int(s["burn_in"]),
        proposal_scale=float(s["proposal_fraction"]) * (prior.upper - prior.lower),
        seed=int(s["seed"]),
    )
    healthy = [c for c, bad in zip(sample.chains, sample.failed) if not bad]
    if not healthy:
        raise RuntimeError("every Metropolis-Hastings chain rejected all proposals")
    est = bayes.posterior_mean(sample)
    pool = exp.ensemble(est.values, exp.config.R_bayes).ravel()
    bw = bayes.silverman_bandwidth(pool) if s["bandwidth"] == "silverman" else float(s["bandwidth"])
    flags = [a for a in sample.acceptance if not 0.1 < a < 0.6]
    diag = {
        "acceptance": sample.acceptance,
        "failed_chains": [i for i, bad in enumerate(sample.failed) if bad],
        "acceptance_out_of_range": bool(flags),
        "bandwidth_at_estimate": bw,
        "retained_draws": int(sample.retained().shape[0]),
    }
    K = int(s["ks_members"])
    members = exp.ensemble(est.values, K)
    panel = []
    for seed, row in zip(exp.seeds[:K], members):
        r = diagnostics.ks_two_sample(exp.real, row)
        panel.append({"seed": seed, "statistic": r.statistic, "p_value": r.p_value})
    diag["ks_fraction_above_0.05"] = float(np.mean([k["p_value"] > 0.05 for k in panel]))
    posterior = {
        "names": list(sample.names),
        "burn_in": sample.burn_in,
        "acceptance": sample.acceptance,
        "retained": [c[sample.burn_in :].tolist() for c in sample.chains],
    }
    result = MethodResult(
        "bayes",
        "ok",
        est.as_dict(),
        loss(exp.space, est),
        None,
        count[0],
        diagnostics=diag,
    )
    return result, posterior, panel


def run_method(exp: Experiment, method: str):
    """Run one method; failures come back as a ``failed`` row instead of raising."""
    t0 = time.perf_counter()
    extra = (None, None)
    try:
        if method == "bayes":
            result, post, panel = _run_bayes(exp)
            extra = (post, panel)
        else:
            result = _run_smd(exp, method)
    except Exception as exc:
        log.warning("method %s failed: %r", method, exc)
        result = MethodResult(method, "failed", error=f"{type(exc).__name__}: {exc}")
    result.wall_time = time.perf_counter() - t0
    log.info("%s done in %.1fs, loss=%s", METHODS[method], result.wall_time, result.loss)
    return result, extra


def run_experiment(
    config: ExperimentConfig, threads: int | None = None, experiment: Experiment | None = None
) -> ExperimentReport:
    """Run every configured method against one truth series."""
    t0 = time.perf_counter()
    exp = experiment or Experiment(config)
    if any(m.startswith("msm") for m in config.methods):
        exp.weight_matrix()
    n = max(1, min(threads or os.cpu_count() or 1, len(config.methods) or 1))
    if n == 1:
        outcomes = [run_method(exp, m) for m in config.methods]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            outcomes = list(pool.map(lambda m: run_method(exp, m), config.methods))
    report = ExperimentReport(
        config=config.echo(),
        free=config.free,
        theta_true=config.free_space.as_dict(),
        truth=_truth_summary(exp.truth),
    )
    for result, (post, panel) in outcomes:
        report.methods.append(result)
        if post is not None:
            report.posterior = post
            report.ks_panel = panel
    report.wall_time = time.perf_counter() - t0
    return report


def _truth_summary(truth: SimOutput) -> dict:
    return {
        "seed": truth.seed,
        "T": truth.T,
        "length": len(truth.values),
        "transforms": [list(t) for t in truth.transforms],
        "stationarity": truth.diagnostics.get("stationarity"),
        "warnings": list(truth.diagnostics.get("warnings", [])),
    }


# --------------------------------------------------------------------------
# surfaces


def grid_surface(
    config: ExperimentConfig | Experiment,
    criterion: str,
    axes: Sequence[str],
    resolution: int,
    ranges: Mapping[str, tuple[float, float]] | None = None,
) -> Surface:
    """Evaluate a criterion on a regular grid over one or two free parameters.

    Free parameters not on an axis stay at their true values.  Points where the
    criterion raises are stored as NaN.
    """
    exp = config if isinstance(config, Experiment) else Experiment(config)
    cfg = exp.config
    axes = tuple(axes)
    if not 1 <= len(axes) <= 2:
        raise ValueError("a surface has one or two axes")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    unknown = [a for a in axes if a not in cfg.free]
    if unknown:
        raise ValueError(f"axes {unknown} are not free parameters {list(cfg.free)}")
    space = cfg.free_space
    ranges = dict(ranges or {})
    ticks = []
    for a in axes:
        lo, hi = ranges.get(a, (space.lower[space.names.index(a)], space.upper[space.names.index(a)]))
        ticks.append(np.linspace(lo, hi, resolution))
    mesh = np.meshgrid(*ticks, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    f = exp.criterion(criterion)
    base = space.values.copy()
    idx = [space.names.index(a) for a in axes]
    values = np.empty(len(points))
    for i, p in enumerate(points):
        th = base.copy()
        th[idx] = p
        try:
            values[i] = float(f(th))
        except Exception as exc:
            log.debug("surface point %s failed: %r", p, exc)
            values[i] = np.nan
    return Surface(criterion, axes, points, values, len(points))
