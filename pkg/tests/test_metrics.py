import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import special, stats

from bistrain.errors import DegenerateInputError, InvalidInputError
from bistrain.metrics import (MetricWindows, Rect, chi2_sf, cnr, friedman, friedman_matrix,
                              gammaincc, patch_sweep, sr, ssim)
from bistrain.phantom import Inclusion, PhantomSpec, local_strain_map


def test_cnr_examples():
    assert cnr(1.0, 0.5, 2.0, 0.5) == 2.0
    assert cnr(1.5, 0.2, 1.5, 0.9) == 0.0
    assert cnr(1.0, 0.3, 2.5, 0.7) == cnr(2.5, 0.7, 1.0, 0.3)
    with pytest.raises(DegenerateInputError):
        cnr(1.0, 0.0, 2.0, 0.0)
    with pytest.raises(InvalidInputError):
        cnr(1.0, -0.1, 2.0, 0.5)


def test_sr_examples():
    assert sr(1.0, 2.0) == 0.5
    assert sr(0.7, 0.7) == 1.0
    with pytest.raises(DegenerateInputError):
        sr(1.0, 0.0)


def windows(target=(4, 4, 13, 17), background=(30, 2, 20, 30), patch=9, stride=4):
    return MetricWindows(Rect(*target), Rect(*background), patch, stride)


def test_patch_cardinality(rng):
    img = rng.uniform(0.5, 1.5, (60, 40))
    rep = patch_sweep(img, windows(target=(4, 4, 9, 13), background=(30, 2, 9, 17)))
    # 1x2 target and 1x3 background positions.
    assert rep.cnr_values.size == 6 and rep.sr_values.size == 6
    rep = patch_sweep(img, windows(target=(4, 4, 13, 9), background=(30, 2, 17, 9)))
    assert rep.cnr_values.size == 6


def test_patch_values_and_order(rng):
    img = rng.uniform(0.5, 1.5, (60, 40))
    w = windows()
    rep = patch_sweep(img, w)
    t_pos = [(a, l) for a in range(4, 4 + 13 - 9 + 1, 4) for l in range(4, 4 + 17 - 9 + 1, 4)]
    b_pos = [(a, l) for a in range(30, 30 + 20 - 9 + 1, 4) for l in range(2, 2 + 30 - 9 + 1, 4)]
    k = 0
    for ta, tl in t_pos:
        t = img[ta:ta + 9, tl:tl + 9]
        for ba, bl in b_pos:
            b = img[ba:ba + 9, bl:bl + 9]
            assert rep.cnr_values[k] == pytest.approx(cnr(t.mean(), t.std(), b.mean(), b.std()),
                                                      rel=1e-12)
            assert rep.sr_values[k] == pytest.approx(t.mean() / b.mean(), rel=1e-12)
            k += 1
    assert k == rep.cnr_values.size
    assert rep.cnr_mean == pytest.approx(rep.cnr_values.mean(), abs=1e-12)
    assert rep.sr_std == pytest.approx(rep.sr_values.std(), abs=1e-12)
    again = patch_sweep(img, w)
    np.testing.assert_array_equal(again.cnr_values, rep.cnr_values)


def test_constant_strain_degenerate():
    rep = patch_sweep(np.full((60, 40), 0.02), windows())
    assert np.all(rep.sr_values == 1.0)
    assert rep.n_degenerate == rep.cnr_values.size
    assert np.all(np.isnan(rep.cnr_values))


def test_window_validation():
    img = np.ones((60, 40))
    with pytest.raises(InvalidInputError):
        patch_sweep(img, windows(target=(4, 4, 9, 9)))  # one target patch
    with pytest.raises(InvalidInputError):
        patch_sweep(img, windows(target=(4, 4, 40, 17)))  # overlaps background
    with pytest.raises(InvalidInputError):
        patch_sweep(img, windows(background=(50, 2, 20, 30)))  # outside
    with pytest.raises(InvalidInputError):
        patch_sweep(img, windows(patch=14))


def test_ideal_phantom_strain_ratio():
    spec = PhantomSpec(rows=256, cols=48, background_strain=0.02,
                       inclusions=(Inclusion(128, 24, 12, 0.5),))
    strain = local_strain_map(spec)
    rep = patch_sweep(strain, windows(target=(120, 16, 16, 16), background=(25, 6, 87, 36)))
    assert abs(100 * rep.sr_mean - 50.0) < 3.0


@given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
def test_cnr_affine_and_sr_scale_invariance(alpha, offset, seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.5, 1.5, (60, 40))
    w = windows()
    base = patch_sweep(img, w)
    moved = patch_sweep(alpha * img + offset, w) if np.all(alpha * img + offset != 0) else base
    np.testing.assert_allclose(moved.cnr_values, base.cnr_values, rtol=1e-9)
    scaled = patch_sweep(-alpha * img, w)
    np.testing.assert_allclose(scaled.sr_values, base.sr_values, rtol=1e-12)


def test_ssim_identity_and_symmetry(rng):
    a = rng.standard_normal((32, 24))
    b = a + 0.3 * rng.standard_normal(a.shape)
    assert ssim(a, a) == 1.0
    assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)
    assert -1 <= ssim(a, -a) <= 1
    assert ssim(np.ones((12, 12)), np.ones((12, 12))) == 1.0


def test_ssim_constant_offset_closed_form():
    a = np.full((16, 16), 2.0)
    b = np.full((16, 16), 3.0)
    c1 = (0.01 * 1.0) ** 2
    expected = (2 * 2.0 * 3.0 + c1) / (2.0 ** 2 + 3.0 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-9)


def test_ssim_matches_skimage(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.standard_normal((40, 30))
    b = 0.7 * a + 0.5 * rng.standard_normal(a.shape)
    dyn = max(a.max(), b.max()) - min(a.min(), b.min())
    ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False, data_range=dyn)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def test_ssim_errors():
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


@pytest.mark.parametrize("s", [0.5, 1.0, 2.5, 7.0, 30.0])
@pytest.mark.parametrize("x", [0.0, 1e-3, 0.7, 3.0, 12.0, 80.0])
def test_gammaincc_against_scipy(s, x):
    assert abs(gammaincc(s, x) - special.gammaincc(s, x)) < 1e-10


def chi2_sf_series(x, dof):
    # Closed forms for the regularised gamma at integer and half-integer shape.
    k = dof / 2.0
    if dof % 2 == 0:
        return math.exp(-x / 2) * sum((x / 2) ** j / math.factorial(j) for j in range(int(k)))
    total, term = 0.0, math.sqrt(x / 2) * math.exp(-x / 2) / math.gamma(1.5)
    for j in range(int(k - 0.5)):
        total += term
        term *= (x / 2) / (1.5 + j)
    return math.erfc(math.sqrt(x / 2)) + total


@pytest.mark.parametrize("dof", [1, 2, 3, 4, 7])
def test_chi2_sf_independent(dof):
    for x in (0.1, 1.0, 6.0, 15.0):
        assert chi2_sf(x, dof) == pytest.approx(chi2_sf_series(x, dof), abs=1e-12)


def test_friedman_examples():
    q, p = friedman([[1, 2, 3]] * 3)
    assert q == pytest.approx(6.0, abs=1e-12)
    assert p == pytest.approx(math.exp(-3.0), abs=1e-12)
    assert p == pytest.approx(0.0498, abs=1e-3)
    q, p = friedman(np.ones((5, 4)))
    assert (q, p) == (0.0, 1.0)
    q, p = friedman([[1, 1], [2, 2]])
    assert (q, p) == (0.0, 1.0)
    with pytest.raises(InvalidInputError):
        friedman([[1, 2, 3]])


def test_friedman_matches_scipy(rng):
    for seed in range(5):
        x = np.round(np.random.default_rng(seed).standard_normal((12, 4)), 1)  # with ties
        q, p = friedman(x)
        ref = stats.friedmanchisquare(*x.T)
        assert q == pytest.approx(ref.statistic, rel=1e-10)
        assert p == pytest.approx(ref.pvalue, abs=1e-10)


def test_friedman_p_monotone_in_q():
    qs = np.linspace(0.0, 30.0, 61)
    ps = [chi2_sf(q, 3) for q in qs]
    assert all(b < a for a, b in zip(ps, ps[1:]))


def test_friedman_calibration():
    rng = np.random.default_rng(42)
    hits = sum(friedman(rng.standard_normal((20, 3)))[1] < 0.05 for _ in range(10_000))
    assert abs(hits / 10_000 - 0.05) <= 0.01


def test_friedman_matrix():
    a = np.arange(10.0)
    out = friedman_matrix({"x": a, "y": a.copy(), "z": a + 1})
    assert [(r[0], r[1]) for r in out] == [("x", "y"), ("x", "z"), ("y", "z")]
    assert out[0][3] == 1.0
    assert out[1][3] < 0.01
    with pytest.raises(InvalidInputError):
        friedman_matrix({"x": a, "y": a[:5]})
