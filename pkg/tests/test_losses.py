import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from texsplat.gradcheck import check_all, check_array, make_fixture
from texsplat.losses import (GroundTruth, LossConfig, l1_loss, pcc, pcc_vjp, rgb_loss, ssim, tadr_loss,
                             tex_loss, total_loss)
from texsplat.raster import Raster
from texsplat.texture import sobel_magnitude


def reference_ssim(a, b, size=11, sigma=1.5):
    """Windowed SSIM evaluated pixel by pixel from its definition (test oracle)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    r = size // 2
    g = np.array([math.exp(-(x * x) / (2 * sigma * sigma)) for x in range(-r, r + 1)])
    g /= g.sum()
    win = np.outer(g, g)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W, C = a.shape
    pa = np.zeros((H + 2 * r, W + 2 * r, C))
    pb = np.zeros_like(pa)
    pa[r:r + H, r:r + W] = a
    pb[r:r + H, r:r + W] = b
    total = 0.0
    for i in range(H):
        for j in range(W):
            wa = pa[i:i + size, j:j + size]
            wb = pb[i:i + size, j:j + size]
            for c in range(C):
                x, y = wa[..., c], wb[..., c]
                mx, my = np.sum(win * x), np.sum(win * y)
                vx = np.sum(win * x * x) - mx * mx
                vy = np.sum(win * y * y) - my * my
                cxy = np.sum(win * x * y) - mx * my
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return total / (H * W * C)


def reference_pcc(x, y, eps):
    x, y = np.ravel(x).astype(float), np.ravel(y).astype(float)
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((x - mx) * (y - my)) / n
    vx, vy = sum((x - mx) ** 2) / n, sum((y - my) ** 2) / n
    return cov / (math.sqrt(max(vx, eps)) * math.sqrt(max(vy, eps)))


# --- PCC ------------------------------------------------------------------------------

def test_pcc_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    assert pcc(x, x) == pytest.approx(1, abs=1e-7)
    assert pcc(x, -x) == pytest.approx(-1, abs=1e-7)
    assert pcc(x, 2 * x + 3) == pytest.approx(1, abs=1e-7)
    assert pcc(np.full(50, 4.0), rng.normal(size=50)) == 0.0


def test_pcc_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, y = rng.normal(size=30), rng.normal(size=30)
        assert pcc(x, y) == pytest.approx(reference_pcc(x, y, 1e-8), abs=1e-12)


def test_pcc_floor_regime():
    rng = np.random.default_rng(3)
    x = 1e-6 * rng.normal(size=50)            # variance far below the floor
    y = rng.normal(size=50)
    true = np.corrcoef(x, y)[0, 1]
    assert pcc(x, y) == pytest.approx(true * math.sqrt(np.var(x) / 1e-8), rel=1e-9)
    gx, gy = pcc_vjp(x, y)
    assert check_array("pcc", "x", lambda v: pcc(v, y), x, gx).passed
    assert check_array("pcc", "y", lambda v: pcc(x, v), y, gy).passed
    gx, _ = pcc_vjp(np.full(10, 2.0), rng.normal(size=10))
    assert gx.shape == (10,)


def test_pcc_errors():
    with pytest.raises(ValueError, match="length mismatch"):
        pcc(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError, match="two samples"):
        pcc(np.zeros(1), np.zeros(1))


vectors = st.integers(2, 60).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-1e3, 1e3, allow_nan=False)),
    arrays(np.float64, n, elements=st.floats(-1e3, 1e3, allow_nan=False))))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_pcc_bounded_and_symmetric(xy):
    x, y = xy
    p = pcc(x, y)
    assert abs(p) <= 1 + 1e-9
    assert p == pcc(y, x)


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0.01, 100), st.floats(-100, 100))
def test_pcc_positive_affine_invariance(xy, a, b):
    x, y = xy
    if min(np.var(x), np.var(a * x), np.var(y)) < 1e-6:   # below the floor the value is scaled down
        return
    assert pcc(a * x + b, y) == pytest.approx(pcc(x, y), abs=1e-9)
    if np.var(x) > 1e-3:
        assert pcc(x, a * x + b) == pytest.approx(1.0, abs=1e-9)


def test_pcc_vjp_matches_finite_differences():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=40), rng.normal(size=40)
    gx, gy = pcc_vjp(x, y)
    assert check_array("pcc", "x", lambda v: pcc(v, y), x, gx).passed
    assert check_array("pcc", "y", lambda v: pcc(x, v), y, gy).passed


# --- photometric -------------------------------------------------------------------------

def test_rgb_loss_examples():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (16, 16, 3))
    assert rgb_loss(a, a) == pytest.approx(0, abs=1e-12)
    assert rgb_loss(np.ones((16, 16, 3)), np.zeros((16, 16, 3)), lambda_ssim=0.0) == 1.0


def test_ssim_matches_definition_seed3():
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (20, 18, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = reference_ssim(a, b)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)
    expected = 0.8 * np.mean(np.abs(a - b)) + 0.2 * (1 - ref)
    assert rgb_loss(a, b, 0.2) == pytest.approx(expected, abs=1e-6)


def test_ssim_gray_images_and_identity():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (12, 12))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    b = rng.uniform(0, 1, (12, 12))
    assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-9)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        l1_loss(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError, match="shape mismatch"):
        tadr_loss(np.zeros((4, 4)), np.zeros((5, 4)))


# --- texture and depth terms -----------------------------------------------------------

def test_tex_loss_examples():
    rng = np.random.default_rng(5)
    gt = rng.uniform(0, 2, (16, 16))
    assert tex_loss(3.0 * gt, gt) == pytest.approx(0, abs=1e-7)
    assert tex_loss(np.full((16, 16), 0.4), gt) == 1.0
    assert tex_loss(-gt, gt) == pytest.approx(2, abs=1e-7)


def test_tadr_examples():
    rng = np.random.default_rng(6)
    d = rng.uniform(1, 3, (16, 16))
    assert tadr_loss(1.7 * d - 0.4, d) == pytest.approx(0, abs=1e-6)
    assert tadr_loss(np.full((16, 16), 2.0), np.full((16, 16), 5.0)) == 1.0


def test_tadr_step_edge_proxy_vs_smooth_render():
    ii, jj = np.indices((16, 16)).astype(float)
    proxy = np.where(jj < 8, 2.0, 3.0)
    smooth = 2.0 + 0.01 * ((ii - 7.5) ** 2 + (jj - 7.5) ** 2)
    assert tadr_loss(smooth, proxy) > 0.5


def test_tadr_affine_invariance_on_either_argument():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d1, d2 = rng.uniform(1, 3, (12, 12)), rng.uniform(1, 3, (12, 12))
        a, b = rng.uniform(0.5, 2), rng.uniform(-1, 1)
        base = tadr_loss(d1, d2)
        assert tadr_loss(a * d1 + b, d2) == pytest.approx(base, abs=1e-6)
        assert tadr_loss(d1, a * d2 + b) == pytest.approx(base, abs=1e-6)


def test_l1_mode():
    rng = np.random.default_rng(8)
    x, y = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
    assert tex_loss(x, y, mode="l1") == pytest.approx(np.mean(np.abs(x - y)))
    assert tadr_loss(x, y, mode="l1") == pytest.approx(np.mean(np.abs(sobel_magnitude(x) - sobel_magnitude(y))))
    with pytest.raises(ValueError, match="tex_mode"):
        LossConfig(tex_mode="mse")


# --- total objective -------------------------------------------------------------------

def _raster_and_gt(seed=9, size=16):
    rng = np.random.default_rng(seed)
    r = Raster(rng.uniform(0, 1, (size, size, 3)), rng.uniform(1, 3, (size, size)), rng.uniform(0, 1, (size, size)),
               rng.uniform(0, 1, (size, size)))
    gt = GroundTruth(rng.uniform(0, 1, (size, size, 3)), rng.uniform(0, 1, (size, size)), rng.uniform(1, 3, (size, size)))
    return r, gt


def test_total_decomposition():
    r, gt = _raster_and_gt()
    cfg = LossConfig(lambda1=0.01, lambda2=0.01)
    rep, _ = total_loss(r, gt, cfg)
    assert rep.total == pytest.approx(rep.rgb + 0.01 * rep.tex + 0.01 * rep.tadr, abs=1e-9)
    assert rep.rgb == pytest.approx(rgb_loss(r.rgb, gt.rgb), abs=1e-12)
    assert rep.tex == pytest.approx(tex_loss(r.ti, gt.ti), abs=1e-12)
    assert rep.tadr == pytest.approx(tadr_loss(r.depth, gt.depth_proxy), abs=1e-12)


def test_total_without_texture_terms_is_rgb():
    r, gt = _raster_and_gt(10)
    rep, adj = total_loss(r, gt, LossConfig(lambda1=0, lambda2=0))
    assert rep.total == rep.rgb
    assert np.all(adj.depth == 0) and np.all(adj.ti == 0)


def test_total_at_perfect_reconstruction():
    r, _ = _raster_and_gt(11)
    gt = GroundTruth(r.rgb, r.ti * 0.5 + 0.1, 2 * r.depth + 1)
    rep, _ = total_loss(r, gt, LossConfig())
    assert rep.total == pytest.approx(0, abs=1e-7)


def test_all_loss_gradients_match_finite_differences():
    for rep in check_all(make_fixture(11), ops=["losses"]):
        assert rep.passed, rep.line()
