from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibench.models import NoiseSource, gaussian_block
from calibench.msm import (
    MOMENT_NAMES,
    DegenerateSeriesError,
    _acf,
    compute_moments,
    estimate_weight_matrix,
    moment_matrix,
    msm_objective,
    weight_from_covariance,
)


def _moments_oracle(x: np.ndarray) -> np.ndarray:
    """Plain numpy version of the seven moments."""
    d = x - x.mean()
    m2 = np.mean(d**2)
    m4 = np.mean(d**4)
    row = x[None, :]
    return np.array(
        [
            m2,
            m4 / m2**2,
            _acf(row, 1)[0],
            _acf(np.abs(row), 1)[0],
            _acf(row**2, 1)[0],
            _acf(np.abs(row), 5)[0],
            _acf(row**2, 5)[0],
        ]
    )


def test_moment_names_are_ordered():
    assert len(MOMENT_NAMES) == 7
    assert MOMENT_NAMES[0] == "variance" and MOMENT_NAMES[1] == "kurtosis"


def test_alternating_series():
    x = np.tile([1.0, -1.0], 500)
    m = compute_moments(x)
    assert m[0] == pytest.approx(1.0)
    assert m[1] == pytest.approx(1.0)
    assert m[2] == pytest.approx(-1.0, abs=2e-3)


def test_constant_series_is_degenerate():
    with pytest.raises(DegenerateSeriesError):
        compute_moments(np.full(100, 3.0))


def test_too_short_series_rejected():
    with pytest.raises(ValueError):
        compute_moments(np.arange(5.0))


def test_iid_normal_moments():
    m = compute_moments(NoiseSource.seeded(0).draw(1_000_000))
    assert abs(m[1] - 3.0) < 0.05
    assert np.all(np.abs(m[2:]) < 0.01)


def test_kernel_matches_numpy_oracle():
    X = gaussian_block(range(5), 400) * 1.5 + 0.3
    X[2] = np.cumsum(X[2]) / 10
    got = moment_matrix(X)
    for i in range(X.shape[0]):
        np.testing.assert_allclose(got[i], _moments_oracle(X[i]), rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50))
def test_location_free_moments_are_shift_invariant(seed, shift):
    x = NoiseSource.seeded(seed).draw(300)
    a = compute_moments(x)
    b = compute_moments(x + shift)
    np.testing.assert_allclose(b[:3], a[:3], rtol=1e-7, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_moment_ranges(seed):
    x = np.cumsum(NoiseSource.seeded(seed).draw(200)) * 0.1 + NoiseSource.seeded(seed + 1).draw(200) ** 3
    m = compute_moments(x)
    assert m[0] > 0 and m[1] >= 1.0
    assert np.all(np.abs(m[2:]) <= 1.0 + 1e-12)


def test_absolute_and_squared_autocorrelations_see_the_level():
    x = NoiseSource.seeded(1).draw(1000)
    assert not np.allclose(compute_moments(x)[3:], compute_moments(x + 3.0)[3:])


def test_weight_matrix_symmetric_psd_and_deterministic():
    x = np.asarray(NoiseSource.seeded(3).draw(1000))
    a = estimate_weight_matrix(x, block_len=25, B=300, seed=7)
    b = estimate_weight_matrix(x, block_len=25, B=300, seed=7)
    assert np.array_equal(a.W, b.W)
    np.testing.assert_allclose(a.W, a.W.T, atol=0)
    assert np.linalg.eigvalsh(a.W).min() >= -1e-10


def test_identity_covariance_gives_identity_weight():
    w = weight_from_covariance(np.eye(7))
    assert w.ridge == 0.0
    np.testing.assert_allclose(w.W, np.eye(7))


def test_singular_covariance_climbs_ridge_ladder():
    cov = np.ones((7, 7))
    w = weight_from_covariance(cov)
    assert w.ridge > 0
    assert np.linalg.eigvalsh(w.W).min() >= -1e-10


def test_block_length_must_be_shorter_than_series():
    with pytest.raises(ValueError):
        estimate_weight_matrix(np.arange(20.0), block_len=20, B=5)


def test_objective_identity_and_unit_case():
    X = gaussian_block(range(4), 200)
    m = moment_matrix(X).mean(axis=0)
    assert msm_objective(m, X, np.eye(7)) == 0.0
    e = np.zeros(7)
    e[0] = 1.0
    assert msm_objective(m - e, X, np.eye(7)) == pytest.approx(1.0)


def test_objective_invariant_to_member_order():
    X = gaussian_block(range(6), 300)
    m = compute_moments(NoiseSource.seeded(99).draw(300))
    W = np.diag(np.arange(1.0, 8.0))
    assert msm_objective(m, X, W) == pytest.approx(msm_objective(m, X[::-1], W), rel=1e-12)


def test_objective_rejects_empty_and_degenerate_members():
    m = np.zeros(7)
    with pytest.raises(ValueError):
        msm_objective(m, np.empty((0, 10)), np.eye(7))
    X = gaussian_block(range(2), 50)
    X[1] = 1.0
    with pytest.raises(DegenerateSeriesError):
        msm_objective(m, X, np.eye(7))


def test_ar1_grid_prefers_truth():
    from scipy.signal import lfilter

    real = lfilter([1.0], [1.0, -0.7], NoiseSource.seeded(0).draw(1000))
    W = estimate_weight_matrix(real, B=500, seed=0)
    m = compute_moments(real)
    Z = gaussian_block(range(1, 101), 1000)
    f = {a: msm_objective(m, lfilter([1.0], [1.0, -a], Z, axis=1), W) for a in (0.1, 0.7, 0.9)}
    assert f[0.7] < f[0.1] and f[0.7] < f[0.9]
