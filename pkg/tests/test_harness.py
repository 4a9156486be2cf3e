from __future__ import annotations

import json
import math

import numpy as np
import pytest
from conftest import FAST

from calibench import harness
from calibench.harness import (
    ConfigError,
    Experiment,
    ExperimentReport,
    SeedDisciplineError,
    export_all,
    export_report,
    grid_surface,
    load_config,
    load_report,
    loss,
    make_truth_data,
    report_json,
    run_experiment,
)
from calibench.models import ParamVector


def pv(**kw):
    return ParamVector.build((k, v, -1e9, 1e9) for k, v in kw.items())


# ---------------------------------------------------------------- loss


def test_loss_examples():
    assert loss(pv(a1=0.7), pv(a1=0.7)) == 0.0
    assert loss(pv(a1=0.7), pv(a1=0.6672)) == pytest.approx(0.0328, abs=1e-12)
    assert round(loss(pv(a0=0.0, a1=0.7), pv(a0=1.0, a1=0.8)), 4) == 1.0050


def test_loss_rejects_mismatched_names():
    with pytest.raises(ValueError):
        loss(pv(a0=0.0, a1=0.7), pv(a1=0.7, a0=0.0))
    with pytest.raises(ValueError):
        loss(pv(a1=0.7), pv(a0=0.7))


# ---------------------------------------------------------------- configuration


EXPECTED_FREE = {
    "ar1": ("a1",),
    "arma_arch_1": ("a0", "a1"),
    "arma_arch_2": ("b1", "b2", "c0", "c1", "c2"),
    "rw_1": ("tau",),
    "rw_2": ("sigma1", "sigma2"),
    "bh_1": ("g2", "b2"),
    "bh_2": ("g2", "b2", "g3", "b3"),
}


def test_presets_ship_with_free_sets():
    assert set(harness.preset_names()) == set(EXPECTED_FREE)
    for name, free in EXPECTED_FREE.items():
        cfg = load_config(name)
        assert cfg.free == free
        assert cfg.truth_seed == 0 and cfg.base_seed == 1
        assert cfg.R_smd == 250 and cfg.R_bayes == 100 and cfg.T_emp == 1000 and cfg.T_sim == 1000
        assert cfg.methods == tuple(harness.METHODS)


def test_table_true_values():
    assert load_config("ar1").theta_true.as_dict() == {"a1": 0.7}
    arma = load_config("arma_arch_1").theta_true.values.tolist()
    assert arma == [0.0, 0.7, 0.1, 0.2, 0.2, 0.25, 0.5, 0.3]
    assert load_config("rw_1").theta_true.values.tolist() == [700, 0.1, 0.2, 1, 2]
    bh = load_config("bh_1").theta_true.values.tolist()
    assert bh == [0, 0, 0.9, 0.2, 0.9, -0.2, 1.01, 0, 0.01, 1]
    b3 = load_config("bh_2").free_space
    assert (b3.lower[3], b3.upper[3]) == (-1.0, 0.0)
    assert load_config("arma_arch_1").free_space.upper.tolist() == [1.0, 0.8]


def test_defaults_are_echoed():
    echo = load_config("ar1", ["methods.pso.budget=100"]).echo()
    assert echo["methods"]["pso"]["budget"] == 100
    assert echo["methods"]["gsl_div"] == {"b": 10, "L": 6}
    assert echo["methods"]["bayes"]["chains"] == 4
    assert echo["methods"]["mic"] == {"lower": -5.0, "upper": 5.0, "r": 5, "L": 3}
    assert echo["ensemble"]["common_random_numbers"] is True
    assert echo["overrides"] == ["methods.pso.budget=100"]


def test_override_parsing():
    assert harness.parse_override("a.b=3") == (["a", "b"], 3)
    assert harness.parse_override("a=[1, 2]") == (["a"], [1, 2])
    assert harness.parse_override("a=hello") == (["a"], "hello")
    with pytest.raises(ConfigError):
        harness.parse_override("novalue")


@pytest.mark.parametrize(
    "override",
    [
        "truth.seed=5",
        "truth.seed=250",
        "ensemble.base_seed=0",
    ],
)
def test_truth_seed_must_not_be_an_ensemble_seed(override):
    with pytest.raises(SeedDisciplineError):
        load_config("ar1", [override])


def test_truth_seed_just_outside_ensemble_range_is_fine():
    cfg = load_config("ar1", ["truth.seed=251"])
    assert cfg.truth_seed not in cfg.ensemble_seeds(cfg.max_R)


@pytest.mark.parametrize(
    "override",
    [
        'truth.free=["zz"]',
        "truth.free=[]",
        'truth.free=["a1", "a1"]',
        "truth.seed=-1",
        "ensemble.R_smd=0",
        'model.name="nope"',
        "truth.bounds.a1=[0.8, 1.0]",
        "truth.bounds.a1=[1.0, 0.0]",
        'methods.run=["bogus"]',
        "methods.bayes.burn_in=6000",
        'methods.bayes.schedule="weird"',
        "ensemble.common_random_numbers=false",
        "truth.params.zz=1.0",
        "methods.mic.r=0",
    ],
)
def test_invalid_configs_rejected(override):
    with pytest.raises(ConfigError):
        load_config("ar1", [override])


def test_unknown_config_source():
    with pytest.raises(ConfigError):
        load_config("/no/such/file.toml")


def test_method_labels_accepted():
    cfg = load_config("ar1", ['methods.run=["MSM/PS", "bayes"]'])
    assert cfg.methods == ("msm/pso", "bayes")


def test_fixed_parameters_held_at_truth():
    cfg = load_config("arma_arch_1")
    exp = Experiment(cfg)
    p = exp.full_params(np.array([0.3, 0.5]))
    assert p["a0"] == 0.3 and p["a1"] == 0.5
    assert p["c1"] == 0.5 and p["b2"] == 0.2


# ---------------------------------------------------------------- truth data and CRN


def test_truth_data_deterministic_and_stationary():
    cfg = load_config("ar1")
    a = make_truth_data(cfg)
    b = make_truth_data(cfg)
    assert a.values.tobytes() == b.values.tobytes()
    assert len(a) == 1000 and a.seed == 0
    assert a.diagnostics["stationarity"]["p_value"] > 0.01
    assert a.diagnostics["warnings"] == []


def test_rw_truth_is_differenced():
    t = make_truth_data(load_config("rw_1"))
    assert t.transforms[-1] == ("first_difference",)
    assert len(t) == 999


def test_ensemble_uses_disjoint_seeds_and_common_random_numbers():
    exp = Experiment(load_config("ar1", FAST))
    assert exp.config.truth_seed not in exp.seeds
    assert exp.seeds[0] == 1
    f = exp.criterion("msm")
    assert f(np.array([0.6])) == f(np.array([0.6]))
    g = exp.criterion("gsl_div")
    assert g(np.array([0.6])) == g(np.array([0.6]))
    np.testing.assert_array_equal(exp.ensemble([0.5], 3), exp.ensemble([0.5], 5)[:3])


def test_objective_maps_degenerate_simulations_to_infinity():
    exp = Experiment(load_config("arma_arch_2", FAST + ["truth.params.c0=0.0"]))
    # all shocks vanish, so every simulated series is constant
    assert exp.objective("msm")(np.zeros(5)) == math.inf
    assert exp.log_target()(np.zeros(5)) == -math.inf


# ---------------------------------------------------------------- runs and reports


@pytest.fixture(scope="module")
def ar1_report():
    return run_experiment(load_config("ar1", FAST), threads=1)


def test_full_run_has_seven_rows(ar1_report):
    r = ar1_report
    assert [m.method for m in r.methods] == list(harness.METHODS)
    assert [m.label for m in r.methods] == ["GSL-div/PS", "GSL-div/KK", "MSM/PS", "MSM/KK", "MIC/PS", "MIC/KK", "BE"]
    assert all(m.status == "ok" for m in r.methods)
    assert all(0 <= m.estimate["a1"] <= 1 for m in r.methods)
    r.check_consistency()
    assert len(r.ks_panel) == 5
    assert r.posterior["names"] == ["a1"]
    assert r.row("BE").diagnostics["retained_draws"] == 60


def test_table_csv_schema(ar1_report):
    lines = harness.table_csv(ar1_report).splitlines()
    assert lines[0] == "method,a1,loss"
    assert len(lines) == 8
    assert lines[-1].startswith("BE,")


def test_report_round_trip_and_idempotent_export(ar1_report, tmp_path):
    export_all(ar1_report, tmp_path / "a")
    back = load_report(tmp_path / "a" / "report.json")
    assert back.to_dict() == json.loads(report_json(ar1_report))
    back.check_consistency()
    export_all(back, tmp_path / "b")
    for name in ("report.json", "table.csv", "posterior_draws.csv", "ks_panel.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_runs_are_deterministic_apart_from_timing(ar1_report):
    again = run_experiment(load_config("ar1", FAST), threads=2)

    def strip(report):
        d = json.loads(report_json(report))
        d.pop("wall_time")
        for m in d["methods"]:
            m.pop("wall_time")
        return d

    assert strip(again) == strip(ar1_report)
    assert harness.table_csv(again) == harness.table_csv(ar1_report)


def test_empty_method_list():
    r = run_experiment(load_config("ar1", ["methods.run=[]"]))
    assert r.methods == [] and r.posterior is None and r.ks_panel is None
    assert r.truth["length"] == 1000 and r.truth["stationarity"]["p_value"] > 0.01
    assert harness.table_csv(r).splitlines() == ["method,a1,loss"]


def test_method_failures_are_isolated(monkeypatch):
    def broken(exp, method):
        raise RuntimeError("diverged")

    monkeypatch.setattr(harness, "_run_smd", broken)
    r = run_experiment(load_config("ar1", FAST + ['methods.run=["msm/pso", "bayes"]']))
    assert r.row("MSM/PS").status == "failed" and "diverged" in r.row("MSM/PS").error
    assert r.row("BE").status == "ok"
    assert harness.table_csv(r).splitlines()[1] == "MSM/PS,,"


def test_consistency_check_detects_tampering(ar1_report):
    d = ar1_report.to_dict()
    d["methods"][0]["loss"] += 1e-6
    with pytest.raises(ValueError):
        ExperimentReport.from_dict(d).check_consistency()


def test_export_errors_carry_the_path(ar1_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export_report(ar1_report, blocker / "sub" / "report.json", "json")
    with pytest.raises(ValueError):
        export_report(ar1_report, tmp_path, "xml")


# ---------------------------------------------------------------- surfaces


def test_surface_resolution_accounting():
    exp = Experiment(load_config("arma_arch_1", FAST))
    assert grid_surface(exp, "msm", ["a1"], 2).n_evals == 2
    s = grid_surface(exp, "msm", ["a0", "a1"], 2)
    assert s.n_evals == 4 and s.points.shape == (4, 2)
    assert len(harness.surface_csv(s).splitlines()) == 1 + 4
    with pytest.raises(ValueError):
        grid_surface(exp, "msm", ["a1"], 1)
    with pytest.raises(ValueError):
        grid_surface(exp, "msm", ["c0"], 3)


def test_gsl_surface_is_flat_in_the_intercept():
    exp = Experiment(load_config("arma_arch_1", FAST))
    s = grid_surface(exp, "gsl_div", ["a0"], 11)
    assert np.max(s.values) - np.min(s.values) == 0.0


@pytest.mark.parametrize("criterion", ["gsl_div", "msm", "mic"])
def test_ar1_surface_minimum_near_truth(criterion):
    exp = Experiment(load_config("ar1", ["ensemble.R_smd=100", "methods.msm.bootstrap=500"]))
    s = grid_surface(exp, criterion, ["a1"], 21)
    best = s.points[np.nanargmin(s.values), 0]
    assert abs(best - 0.7) <= 0.1


def test_surface_records_failures_as_nan():
    exp = Experiment(load_config("arma_arch_2", FAST + ["truth.params.c1=0.0", "truth.params.c2=0.0"]))
    # with no ARCH terms, c0 = 0 makes every simulated series constant
    s = grid_surface(exp, "msm", ["c0"], 3, ranges={"c0": (0.0, 0.5)})
    assert np.isnan(s.values[0]) and np.all(np.isfinite(s.values[1:]))


def test_with_real_swaps_observed_data_only():
    exp = Experiment(load_config("ar1", FAST))
    moved = exp.with_real(exp.real + 2.0)
    assert moved.seeds == exp.seeds and moved.real[0] == exp.real[0] + 2.0
    th = np.array([0.7])
    assert moved.criterion("gsl_div")(th) == exp.criterion("gsl_div")(th)
    assert moved.criterion("msm")(th) != exp.criterion("msm")(th)
    assert moved.weight_matrix() is not exp.weight_matrix()
