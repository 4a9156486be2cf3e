from __future__ import annotations

import numpy as np
import pytest

from calibench import diagnostics
from calibench.models import (
    BH_NAMES,
    BoundsError,
    NoiseExhausted,
    NoiseSource,
    ParamVector,
    SeriesTooShort,
    SimOutput,
    first_difference,
    gaussian_block,
    simulate_ar1,
    simulate_arma_arch,
    simulate_brock_hommes,
    simulate_rw_break,
    transform_shortening,
)

ARMA_NAMES = ("a0", "a1", "a2", "b1", "b2", "c0", "c1", "c2")
ARMA_TRUE = (0.0, 0.7, 0.1, 0.2, 0.2, 0.25, 0.5, 0.3)
RW_TRUE = {"tau": 700.0, "sigma1": 0.1, "sigma2": 0.2, "d1": 1.0, "d2": 2.0}
BH_TRUE = (0.0, 0.0, 0.9, 0.2, 0.9, -0.2, 1.01, 0.0, 0.01, 1.0)


def pv(**kw) -> ParamVector:
    return ParamVector.build((k, v, min(v, -10.0), max(v, 1000.0)) for k, v in kw.items())


def arma(**kw) -> ParamVector:
    vals = {n: 0.0 for n in ARMA_NAMES}
    vals.update(kw)
    return pv(**vals)


def rw(**kw) -> ParamVector:
    vals = dict(RW_TRUE)
    vals.update(kw)
    return pv(**vals)


def bh(values=BH_TRUE) -> ParamVector:
    return pv(**dict(zip(BH_NAMES, values)))


def zeros(n):
    return NoiseSource.injected(np.zeros(n))


# ---------------------------------------------------------------- ParamVector


def test_param_vector_rejects_out_of_bounds_value():
    with pytest.raises(BoundsError):
        ParamVector.build([("a1", 1.5, 0.0, 1.0)])


def test_param_vector_rejects_duplicate_names():
    with pytest.raises(ValueError):
        ParamVector.build([("a", 0.1, 0, 1), ("a", 0.2, 0, 1)])


def test_param_vector_keeps_order_and_replaces_values():
    p = ParamVector.build([("b", 0.1, 0, 1), ("a", 0.2, 0, 1)])
    assert p.names == ("b", "a")
    q = p.with_values({"a": 0.5})
    assert q["a"] == 0.5 and q["b"] == 0.1
    assert p.subset(["a"]).names == ("a",)


# ---------------------------------------------------------------- noise


def test_seeded_noise_is_reproducible_and_prefix_consistent():
    a = NoiseSource.seeded(3).draw(50)
    b = NoiseSource.seeded(3).draw(50)
    assert np.array_equal(a, b)
    assert np.array_equal(gaussian_block([3], 20)[0], a[:20])
    assert not np.array_equal(a, NoiseSource.seeded(4).draw(50))


def test_injected_noise_replays_then_errors():
    src = NoiseSource.injected([1.0, 2.0, 3.0])
    assert src.draw(2).tolist() == [1.0, 2.0]
    with pytest.raises(NoiseExhausted):
        src.draw(2)


# ---------------------------------------------------------------- AR(1)


def test_ar1_zero_noise_recurrence():
    out = simulate_ar1(pv(a1=0.7), 4, NoiseSource.injected([1, 0, 0, 0]))
    np.testing.assert_allclose(out.values, [1, 0.7, 0.49, 0.343], rtol=0, atol=1e-15)


def test_ar1_with_zero_coefficient_is_the_noise():
    out = simulate_ar1(pv(a1=0.0), 100, NoiseSource.seeded(11))
    assert np.array_equal(out.values, NoiseSource.seeded(11).draw(100))


def test_ar1_deterministic():
    a = simulate_ar1(pv(a1=0.7), 1000, NoiseSource.seeded(5)).values
    b = simulate_ar1(pv(a1=0.7), 1000, NoiseSource.seeded(5)).values
    assert a.tobytes() == b.tobytes()


def test_ar1_bounds_and_exhaustion():
    with pytest.raises(BoundsError):
        simulate_ar1(pv(a1=1.2), 10, NoiseSource.seeded(0))
    with pytest.raises(NoiseExhausted):
        simulate_ar1(pv(a1=0.5), 10, NoiseSource.injected([0.0] * 5))


# ---------------------------------------------------------------- ARMA-ARCH


def test_arma_fixed_point():
    out = simulate_arma_arch(arma(a0=1.0), 50, zeros(150))
    assert len(out) == 50
    assert np.all(out.values == 1.0)
    assert out.transforms == (("drop_burn_in", 100),)
    assert len(out) == out.T - transform_shortening(out.transforms)


def _arma_reference(p, eps):
    """Direct transcription of both recursions; the variance uses the standardised draws."""
    n = eps.size
    x = np.zeros(n + 2)
    z = np.concatenate([[0.0, 0.0], eps])
    sd = np.full(n + 2, np.sqrt(p["c0"]))
    for t in range(2, n + 2):
        sd[t] = np.sqrt(p["c0"] + p["c1"] * z[t - 1] ** 2 + p["c2"] * z[t - 2] ** 2)
        x[t] = (
            p["a0"]
            + p["a1"] * x[t - 1]
            + p["a2"] * x[t - 2]
            + p["b1"] * sd[t - 1] * z[t - 1]
            + p["b2"] * sd[t - 2] * z[t - 2]
            + sd[t] * z[t]
        )
    return x[2:]


def test_arma_matches_direct_recursion():
    eps = NoiseSource.seeded(9).draw(300)
    p = dict(zip(ARMA_NAMES, (0.1, 0.5, 0.2, 0.3, 0.1, 0.2, 0.4, 0.2)))
    out = simulate_arma_arch(arma(**p), 200, NoiseSource.injected(eps))
    np.testing.assert_allclose(out.values, _arma_reference(p, eps)[100:], rtol=1e-12, atol=1e-12)


def test_arma_pure_arch_variance():
    out = simulate_arma_arch(arma(c0=0.25), 1_000_000, NoiseSource.seeded(1))
    assert abs(out.values.var() / 0.25 - 1.0) < 0.01


def test_arma_rejects_explosive_a1():
    with pytest.raises(BoundsError):
        simulate_arma_arch(arma(a1=0.85), 10, NoiseSource.seeded(0))


# ---------------------------------------------------------------- random walk with break


def test_rw_pure_drift():
    out = simulate_rw_break(rw(tau=5.0, d1=1.0, d2=1.0), 5, zeros(4))
    assert out.values.tolist() == [0, 1, 2, 3, 4]


def test_rw_slope_change_after_break():
    out = simulate_rw_break(rw(tau=2.0, d1=1.0, d2=2.0), 5, zeros(4))
    assert out.values.tolist() == [0, 1, 2, 4, 6]


def test_rw_tau_rounds_to_nearest_integer():
    a = simulate_rw_break(rw(tau=2.4, d1=1.0, d2=2.0), 5, zeros(4)).values
    b = simulate_rw_break(rw(tau=1.6, d1=1.0, d2=2.0), 5, zeros(4)).values
    assert a.tolist() == b.tolist() == [0, 1, 2, 4, 6]


def test_rw_tau_outside_horizon_rejected():
    with pytest.raises(BoundsError):
        simulate_rw_break(rw(tau=11.0), 10, NoiseSource.seeded(0))


def test_first_difference_examples():
    out = simulate_rw_break(rw(tau=2.0, d1=1.0, d2=2.0), 5, zeros(4))
    d = first_difference(out)
    assert d.values.tolist() == [1, 1, 2, 2]
    assert d.transforms[-1] == ("first_difference",)
    assert len(d) == d.T - transform_shortening(d.transforms)
    flat = simulate_rw_break(rw(tau=5.0, d1=0.0, d2=0.0), 5, zeros(4))
    assert np.all(first_difference(flat).values == 0)


def test_first_difference_inverts_cumulative_sum():
    y = NoiseSource.seeded(2).draw(30)
    s = SimOutput(np.concatenate([[0.0], np.cumsum(y)]), "rw_break", pv(a1=0.0), None, 31)
    np.testing.assert_allclose(first_difference(s).values, y, atol=1e-12)


def test_first_difference_too_short():
    s = simulate_ar1(pv(a1=0.5), 1, NoiseSource.seeded(0))
    with pytest.raises(SeriesTooShort):
        first_difference(s)


# ---------------------------------------------------------------- Brock-Hommes


def test_bh_fixed_point():
    out = simulate_brock_hommes(bh([0.0] * 8 + [0.01, 1.0]), 200, zeros(300))
    assert np.all(out.values == 0.0)


def test_bh_zero_intensity_gives_equal_fractions():
    frac = np.zeros((300, 4))
    simulate_brock_hommes(bh(BH_TRUE[:9] + (0.0,)), 200, NoiseSource.seeded(3), fractions=frac)
    assert np.all(frac == 0.25)


def test_bh_fractions_form_a_simplex():
    frac = np.zeros((1100, 4))
    simulate_brock_hommes(bh(), 1000, NoiseSource.seeded(4), fractions=frac)
    assert np.all(frac >= 0)
    np.testing.assert_allclose(frac.sum(axis=1), 1.0, atol=1e-12)


def _bh_reference(p, eps, sigma):
    """Direct transcription with lag states x0 = x1 = x2 = 0 and uniform initial fractions."""
    g = np.array([p["g1"], p["g2"], p["g3"], p["g4"]])
    b = np.array([p["b1"], p["b2"], p["b3"], p["b4"]])
    R = 1.0 + p["r"]
    n = eps.size
    x = np.zeros(n + 3)
    for t in range(3, n + 3):
        U = (x[t - 1] - R * x[t - 2]) * (g * x[t - 3] + b - R * x[t - 2])
        z = p["beta"] * U
        w = np.exp(z - z.max())
        frac = w / w.sum()
        x[t] = frac @ (g * x[t - 1] + b) / R + sigma * eps[t - 3]
    return x[3:]


def test_bh_matches_direct_recursion():
    eps = NoiseSource.seeded(6).draw(400)
    p = dict(zip(BH_NAMES, BH_TRUE))
    out = simulate_brock_hommes(bh(), 300, NoiseSource.injected(eps), sigma_eps=0.01)
    np.testing.assert_allclose(out.values, _bh_reference(p, eps, 0.01)[100:], rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------- stationarity of benchmark outputs


def _series(model, seed):
    src = NoiseSource.seeded(seed)
    if model == "ar1":
        return simulate_ar1(pv(a1=0.7), 1000, src).values
    if model == "arma":
        return simulate_arma_arch(arma(**dict(zip(ARMA_NAMES, ARMA_TRUE))), 1000, src).values
    if model == "rw":
        return first_difference(simulate_rw_break(rw(), 1000, src)).values
    return simulate_brock_hommes(bh(), 1000, src).values


RW_BREAK_XFAIL = pytest.mark.xfail(
    strict=True,
    reason="the drift change at tau=700 shifts the mean of the differenced series; about 9% of seeds reject",
)


@pytest.mark.parametrize("model", ["ar1", "arma", pytest.param("rw", marks=RW_BREAK_XFAIL), "bh"])
def test_benchmark_outputs_pass_stationarity_test(model):
    rejections = sum(diagnostics.stationarity_runs_test(_series(model, s)).p_value < 0.01 for s in range(200))
    assert rejections <= 10


def test_differenced_rw_without_break_passes_stationarity_test():
    def series(seed):
        return first_difference(simulate_rw_break(rw(tau=1000.0), 1000, NoiseSource.seeded(seed))).values

    rejections = sum(diagnostics.stationarity_runs_test(series(s)).p_value < 0.01 for s in range(200))
    assert rejections <= 10
