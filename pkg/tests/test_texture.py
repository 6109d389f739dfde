import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from texsplat.gradcheck import check_array
from texsplat.texture import (SOBEL_X, SOBEL_Y, luminance, sobel_magnitude, sobel_magnitude_vjp, sobel_ti,
                              texture_map, ti_of_depth)


def dense_sobel(img):
    """Naive per-pixel 3x3 correlation with replicate borders (test oracle).

    The horizontal response sums the stencil row by row, the vertical one
    column by column.
    """
    H, W = img.shape

    def px(i, j):
        return img[min(max(i, 0), H - 1), min(max(j, 0), W - 1)]

    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            gx = 0.0
            for a in range(3):
                for b in range(3):
                    gx = gx + SOBEL_X[a, b] * px(i + a - 1, j + b - 1)
            gy = 0.0
            for b in range(3):
                for a in range(3):
                    gy = gy + SOBEL_Y[a, b] * px(i + a - 1, j + b - 1)
            out[i, j] = math.sqrt(gx * gx + gy * gy)
    return out


def test_luminance_examples():
    assert luminance(np.array([1.0, 1.0, 1.0])) == pytest.approx(1.0, abs=1e-15)
    assert luminance(np.array([1.0, 0.0, 0.0])) == 0.299
    for g in (0.0, 0.25, 0.7):
        assert luminance(np.array([g, g, g])) == pytest.approx(g, abs=1e-15)


@pytest.mark.parametrize("c", [0.3, 1 / 3, -7.1, 1e9 + 0.1])
def test_constant_image_is_zero(c):
    assert np.all(sobel_ti(np.full((6, 7), c)).values == 0)


def test_ramps_give_exactly_eight():
    j = np.tile(np.arange(12.0), (10, 1))
    i = j.T.copy()
    assert np.all(sobel_ti(j).values[1:-1, 1:-1] == 8.0)
    assert np.all(sobel_ti(i).values[1:-1, 1:-1] == 8.0)


def test_single_bright_pixel_matches_dense_oracle():
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    ti = sobel_ti(img).values
    np.testing.assert_array_equal(ti, dense_sobel(img))
    assert ti[3, 3] == 0
    assert ti[2, 3] == 2 and ti[3, 2] == 2
    assert ti[2, 2] == pytest.approx(math.sqrt(2), abs=1e-15)


def test_matches_dense_oracle_bit_for_bit_random():
    rng = np.random.default_rng(0)
    for shape in ((3, 3), (5, 9), (16, 16), (21, 13)):
        img = rng.normal(size=shape)
        np.testing.assert_array_equal(sobel_ti(img).values, dense_sobel(img))


def test_depth_step_gives_four_h():
    h = 2.5
    depth = np.ones((8, 10))
    depth[:, 5:] += h
    ti = ti_of_depth(depth)
    assert ti.source_kind == "depth"
    np.testing.assert_allclose(ti.values[1:-1, 4], 4 * h, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ti.values[1:-1, 5], 4 * h, rtol=0, atol=1e-12)
    assert np.all(ti.values[:, :4] == 0) and np.all(ti.values[:, 6:] == 0)
    assert np.all(ti_of_depth(np.full((5, 5), 3.0)).values == 0)


def test_too_small_image_is_an_error():
    with pytest.raises(ValueError, match="3x3"):
        sobel_ti(np.zeros((2, 5)))


images = arrays(np.float64, st.tuples(st.integers(3, 10), st.integers(3, 10)),
                elements=st.floats(-4, 4, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(images, st.floats(-3, 3), st.floats(0.1, 5))
def test_translation_invariance_and_homogeneity(img, c, a):
    base = sobel_magnitude(img)
    np.testing.assert_allclose(sobel_magnitude(img + c), base, atol=1e-9)
    np.testing.assert_allclose(sobel_magnitude(a * img), a * base, atol=1e-9, rtol=1e-12)
    assert np.all(base >= 0)


def test_affine_depth_scales_ti_by_a():
    rng = np.random.default_rng(4)
    d = rng.uniform(1, 3, (9, 9))
    np.testing.assert_allclose(ti_of_depth(2.5 * d - 0.7).values, 2.5 * ti_of_depth(d).values, rtol=1e-12)


def test_channel_modes():
    rng = np.random.default_rng(5)
    rgb = rng.uniform(0, 1, (8, 8, 3))
    lum = texture_map(rgb, "luminance").values
    np.testing.assert_array_equal(lum, sobel_magnitude(luminance(rgb)))
    per = np.stack([sobel_magnitude(rgb[..., c]) for c in range(3)])
    np.testing.assert_allclose(texture_map(rgb, "mean").values, per.mean(0))
    np.testing.assert_allclose(texture_map(rgb, "max").values, per.max(0))
    with pytest.raises(ValueError, match="channel mode"):
        texture_map(rgb, "sum")


def test_checker_boundaries_are_maxima():
    img = np.kron((np.indices((4, 4)).sum(0) % 2).astype(float), np.ones((6, 6)))
    ti = sobel_ti(img).values
    np.testing.assert_array_equal(ti, dense_sobel(img))
    edges = np.zeros_like(img, dtype=bool)
    edges[:, [5, 6, 11, 12, 17, 18]] = True
    edges[[5, 6, 11, 12, 17, 18], :] = True
    assert ti[~edges].max() == 0
    assert ti[edges].min() > 0


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    img = rng.normal(size=(9, 11))
    w = rng.normal(size=(9, 11))
    rep = check_array("texture", "sobel", lambda x: float(np.sum(sobel_magnitude(x) * w)), img,
                      sobel_magnitude_vjp(img, w))
    assert rep.passed, rep.line()


def test_backward_is_zero_at_flat_regions():
    g = sobel_magnitude_vjp(np.full((5, 5), 2.0), np.ones((5, 5)))
    assert np.all(g == 0)
