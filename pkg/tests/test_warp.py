import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from bistrain.errors import InvalidInputError
from bistrain.warp import (BiDisplacement, DisplacementField, interpolate_linear,
                           sample_bilinear, warp_gradient, warp_image,
                           window_multiplicity, windowed_data_residual)


def random_field(rng, shape, scale=2.0):
    return DisplacementField(scale * rng.uniform(-1, 1, shape), scale * rng.uniform(-1, 1, shape))


def test_zero_field_identity(rng):
    img = rng.standard_normal((20, 14))
    out, valid = warp_image(img, DisplacementField.zeros(img.shape))
    np.testing.assert_array_equal(out, img)
    assert valid.all()


def test_integer_shift():
    img = np.arange(10 * 6, dtype=float).reshape(10, 6)
    field = DisplacementField(np.full(img.shape, 2.0), np.zeros(img.shape))
    out, valid = warp_image(img, field)
    np.testing.assert_array_equal(out[:-2], img[2:])
    assert valid[:-2].all() and not valid[-2:].any()
    assert np.all(out[-2:] == 0)


def test_half_sample_on_ramp():
    img = np.repeat(np.arange(12, dtype=float)[:, None], 5, axis=1)
    field = DisplacementField(np.full(img.shape, 0.5), np.zeros(img.shape))
    out, valid = warp_image(img, field)
    np.testing.assert_allclose(out[valid], (img + 0.5)[valid], atol=1e-14)
    assert not valid[-1].any()


def test_matches_map_coordinates(rng):
    img = rng.standard_normal((18, 15))
    field = random_field(rng, img.shape, 3.0)
    out, valid = warp_image(img, field)
    a, l = np.mgrid[0:18, 0:15].astype(float)
    ref = ndimage.map_coordinates(img, [a + field.w_a, l + field.w_l], order=1, mode="nearest")
    np.testing.assert_allclose(out[valid], ref[valid], atol=1e-12)
    assert np.all(out[~valid] == 0)


def test_channel_stack(rng):
    img = rng.standard_normal((3, 16, 12))
    field = random_field(rng, (16, 12))
    out, _ = warp_image(img, field)
    for c in range(3):
        np.testing.assert_allclose(out[c], warp_image(img[c], field)[0], atol=0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_linearity_in_image(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 12, 10))
    field = random_field(rng, (12, 10))
    lhs = warp_image(a * x + b * y, field)[0]
    rhs = a * warp_image(x, field)[0] + b * warp_image(y, field)[0]
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        warp_image(np.zeros((5, 5)), DisplacementField.zeros((5, 6)))
    with pytest.raises(InvalidInputError):
        DisplacementField(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(InvalidInputError):
        DisplacementField(np.full((4, 4), np.nan), np.zeros((4, 4)))


def test_gradient_trivial_cases(rng):
    img = rng.standard_normal((10, 8))
    field = random_field(rng, img.shape)
    g_a, g_l = warp_gradient(img, field, np.zeros(img.shape))
    assert np.all(g_a == 0) and np.all(g_l == 0)
    ramp = 3.0 * np.repeat(np.arange(10, dtype=float)[:, None], 8, axis=1)
    g_a, g_l = warp_gradient(ramp, DisplacementField.zeros(ramp.shape), np.ones(ramp.shape))
    np.testing.assert_allclose(g_a[1:-1, 1:-1], 3.0)
    np.testing.assert_allclose(g_l[1:-1, 1:-1], 0.0, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_directional_derivative(seed):
    rng = np.random.default_rng(seed)
    shape = (24, 24)
    img = rng.standard_normal(shape)
    field = random_field(rng, shape, 1.5)
    # Keep away from grid nodes and frame edges where the interpolant kinks.
    a, l = np.mgrid[0:24, 0:24]
    for comp, base in ((field.w_a, a), (field.w_l, l)):
        frac = (base + comp) % 1.0
        comp += np.where((frac < 0.05) | (frac > 0.95), 0.1, 0.0)
    upstream = rng.standard_normal(shape)
    d_a, d_l = rng.standard_normal((2,) + shape)
    g_a, g_l = warp_gradient(img, field, upstream)
    analytic = np.sum(g_a * d_a) + np.sum(g_l * d_l)
    h = 1e-5

    def objective(t):
        f = DisplacementField(field.w_a + t * d_a, field.w_l + t * d_l)
        out, valid = warp_image(img, f)
        return np.sum(upstream * out), valid

    plus, vp = objective(h)
    minus, vm = objective(-h)
    assert np.array_equal(vp, vm)
    numeric = (plus - minus) / (2 * h)
    assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-12)


def test_left_cell_tie_break():
    img = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
    ya = np.array([[1.0]])
    yl = np.array([[0.25]])
    _, d_a, _, _ = sample_bilinear(img, ya, yl, derivatives=True)
    assert d_a[0, 0] == 1.0  # slope of cell [0, 1]
    _, d_mean, _, _ = sample_bilinear(img, ya, yl, derivatives=True, node_slope="mean")
    assert d_mean[0, 0] == 2.5


def test_windowed_residual_examples(rng):
    x = rng.standard_normal((3, 7, 7))
    same = windowed_data_residual(x, x, 3)
    assert np.all(same.values == 0)
    y = rng.standard_normal((3, 7, 7))
    one = windowed_data_residual(x, y, 1)
    np.testing.assert_array_equal(one.values[..., 0], x - y)
    res = windowed_data_residual(x, y, 3)
    assert res.valid[:, 3, 3].sum(axis=-1).tolist() == [9, 9, 9]
    assert res.valid[0, 0, 0].sum() == 4
    assert res.flat().size == 3 * window_multiplicity((7, 7), 3).sum()
    with pytest.raises(InvalidInputError):
        windowed_data_residual(x, y, 2)


def test_windowed_residual_neighbours(rng):
    x = rng.standard_normal((6, 5))
    res = windowed_data_residual(x, np.zeros_like(x), 3)
    # Offset k = 3 * (da + 1) + (dl + 1).
    assert res.values[0, 2, 2, 0] == x[1, 1]
    assert res.values[0, 2, 2, 8] == x[3, 3]
    assert res.values[0, 2, 2, 4] == x[2, 2]


def test_window_multiplicity_counts():
    m = window_multiplicity((5, 4), 3)
    expected = np.zeros((5, 4))
    for a in range(5):
        for l in range(4):
            for da in (-1, 0, 1):
                for dl in (-1, 0, 1):
                    if 0 <= a + da < 5 and 0 <= l + dl < 4:
                        expected[a + da, l + dl] += 1
    np.testing.assert_array_equal(m, expected)


def test_bidisplacement_stack(rng):
    s = rng.standard_normal((4, 6, 5))
    bi = BiDisplacement.from_stack(s)
    np.testing.assert_array_equal(bi.stack(), s)
    np.testing.assert_array_equal(bi.swapped().stack(), s[[2, 3, 0, 1]])
    with pytest.raises(InvalidInputError):
        BiDisplacement(DisplacementField.zeros((3, 3)), DisplacementField.zeros((3, 4)))


def test_interpolate_linear_exact_on_affine():
    a, l = np.mgrid[0:6, 0:5].astype(float)
    grid = 0.3 * a - 0.7 * l + 2.0
    ya = np.array([-1.5, 0.25, 4.9, 7.0])
    yl = np.array([0.5, -2.0, 3.3, 6.0])
    np.testing.assert_allclose(interpolate_linear(grid, ya, yl), 0.3 * ya - 0.7 * yl + 2.0,
                               atol=1e-13)
