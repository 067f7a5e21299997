import numpy as np
import pytest
from hypothesis import given, strategies as st

from bistrain.errors import InvalidInputError
from bistrain.strain import StrainField, lsq_strain, window_bounds

WINDOWS = (5, 15, 30, 40)


def fit_slope(y, start, stop):
    x = np.arange(start, stop + 1, dtype=float)
    return np.polyfit(x, y[start:stop + 1], 1)[0]


@pytest.mark.parametrize("window", WINDOWS + (2, 3))
def test_affine_exact(window):
    a, l = np.mgrid[0:64, 0:20].astype(float)
    u = 0.01 * a + 0.3 * l - 2.0
    s = lsq_strain(u, window, "axial")
    assert isinstance(s, StrainField)
    assert np.max(np.abs(s.values - 0.01)) < 1e-12
    lat = lsq_strain(0.02 * l + 0.5 * a, min(window, 20), "lateral")
    assert np.max(np.abs(lat.values - 0.02)) < 1e-12


def test_constant_zero():
    assert np.max(np.abs(lsq_strain(np.full((50, 16), 3.2), 15).values)) < 1e-14


def test_matches_polyfit(rng):
    u = rng.standard_normal((41, 3))
    for window in (2, 5, 8, 15):
        s = lsq_strain(u, window).values
        start, stop = window_bounds(41, window)
        for i in range(41):
            assert s[i, 1] == pytest.approx(fit_slope(u[:, 1], start[i], stop[i]), abs=1e-12)


def test_window_bounds_policy():
    start, stop = window_bounds(20, 5)
    assert (start[10], stop[10]) == (8, 12)
    assert (start[0], stop[0]) == (0, 1)
    assert (start[1], stop[1]) == (0, 2)
    assert (start[19], stop[19]) == (18, 19)
    start, stop = window_bounds(20, 4)
    assert (start[10], stop[10]) == (9, 12)
    assert np.all(stop - start >= 1)


def test_window_two_is_forward_difference(rng):
    u = rng.standard_normal((30, 4))
    s = lsq_strain(u, 2).values
    np.testing.assert_allclose(s[:-1], u[1:] - u[:-1], atol=1e-13)
    np.testing.assert_allclose(s[-1], u[-1] - u[-2], atol=1e-13)


def test_noise_suppression_grows_with_window():
    a = np.arange(200, dtype=float)[:, None] * np.ones((1, 16))
    stds = {5: [], 40: []}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        u = 0.01 * a + 0.05 * rng.standard_normal(a.shape)
        for w in stds:
            stds[w].append(lsq_strain(u, w).values.std())
    assert all(s40 < s5 for s5, s40 in zip(stds[5], stds[40]))


@given(st.floats(-3, 3), st.floats(-3, 3), st.sampled_from(WINDOWS), st.integers(0, 1000))
def test_linearity(alpha, beta, window, seed):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 48, 6))
    lhs = lsq_strain(alpha * u + beta * v, window).values
    rhs = alpha * lsq_strain(u, window).values + beta * lsq_strain(v, window).values
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_transverse_shift_equivariance(rng):
    u = rng.standard_normal((60, 10))
    base = lsq_strain(u, 15).values
    np.testing.assert_array_equal(lsq_strain(np.roll(u, 3, axis=1), 15).values,
                                  np.roll(base, 3, axis=1))


def test_errors():
    with pytest.raises(InvalidInputError):
        lsq_strain(np.zeros((20, 20)), 21)
    with pytest.raises(InvalidInputError):
        lsq_strain(np.zeros((20, 5)), 6, "lateral")
    with pytest.raises(InvalidInputError):
        lsq_strain(np.zeros((20, 5)), 1)
    with pytest.raises(InvalidInputError):
        lsq_strain(np.zeros((20, 5)), 5, "diagonal")
    with pytest.raises(InvalidInputError):
        StrainField(np.full((3, 3), np.nan), 5, "axial")
