import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import front_camera, random_cloud
from texsplat.deformation import (MIN_SCALE, Delta, DeformationParams, apply, deform, deform_backward,
                                  deform_with_cache, positional_encoding, positional_encoding_vjp)
from texsplat.gradcheck import check_all, check_array, make_fixture
from texsplat.raster import Raster, render, render_backward
from texsplat.scene import activate


# --- positional encoding ----------------------------------------------------------------

def test_encoding_at_zero_alternates():
    enc = positional_encoding(np.zeros(3), 4)
    assert enc.shape == (24,)
    assert np.array_equal(enc, np.tile([0.0, 1.0], 12))


def test_encoding_hand_values():
    np.testing.assert_allclose(positional_encoding(0.5, 1), [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(positional_encoding(1.0, 2), [0.0, -1.0, 0.0, 1.0], atol=1e-15)


def test_encoding_shapes_and_errors():
    assert positional_encoding(np.zeros((7, 3)), 10).shape == (7, 60)
    with pytest.raises(ValueError, match="L must be >= 1"):
        positional_encoding(np.zeros(3), 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.integers(1, 6))
def test_encoding_entries_on_unit_circle(v, L):
    enc = positional_encoding(np.array([v]), L).reshape(L, 2)
    np.testing.assert_allclose(np.sum(enc ** 2, axis=1), 1.0, atol=1e-12)


def test_encoding_vjp_matches_finite_differences():
    rng = np.random.default_rng(0)
    v = rng.uniform(-1, 1, (4, 3))
    w = rng.normal(size=(4, 24))
    g = positional_encoding_vjp(v, 4, w)
    assert check_array("encoding", "v", lambda x: float(np.sum(positional_encoding(x, 4) * w)), v, g).passed


# --- MLP ---------------------------------------------------------------------------

def test_zero_head_gives_zero_offsets():
    params = DeformationParams.init(0, depth=3, width=16, L_pos=4, L_time=3, dtype=np.float64)
    pos = np.random.default_rng(1).uniform(-1, 1, (9, 3))
    for t in (0.0, 0.3, 1.0):
        d = deform(params, pos, t)
        assert d.dx.shape == (9, 3) and d.dr.shape == (9, 4) and d.ds.shape == (9, 3)
        assert not np.any(d.dx) and not np.any(d.dr) and not np.any(d.ds)


def test_zero_head_constant_loss_has_zero_weight_gradients():
    fx = make_fixture(11, zero_head=True)
    _, cache = deform_with_cache(fx.deformation, fx.positions, fx.t)
    n = len(fx.positions)
    grads = deform_backward(fx.deformation, cache, np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)))
    assert all(not np.any(g) for g in grads)
    assert all(r.passed for r in check_all(fx, ops=["deformation"]))


def test_mlp_gradients_seed5():
    fx = make_fixture(5)
    reports = check_all(fx, ops=["deformation", "encoding"])
    assert len(reports) == 2 * 3 + 2
    for r in reports:
        assert r.passed, r.line()


def test_timestamp_outside_range():
    params = DeformationParams.init(0, depth=1, width=4, L_pos=2, L_time=2)
    with pytest.raises(ValueError, match="outside"):
        deform(params, np.zeros((2, 3)), 1.5)


def test_non_finite_parameters_rejected():
    params = DeformationParams.init(0, depth=1, width=4, L_pos=2, L_time=2, dtype=np.float64)
    params.layers[0][0][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        deform(params, np.zeros((2, 3)), 0.5)


def test_params_bytes_roundtrip():
    params = make_fixture(3).deformation.astype(np.float32)   # stored as 32-bit floats
    back = DeformationParams.from_bytes(params.to_bytes())
    assert back.equals(params)
    assert back.L_pos == params.L_pos and back.L_time == params.L_time


# --- stop-gradient contract --------------------------------------------------------

def test_position_gradient_is_direct_path_only():
    cloud = random_cloud(5, seed=4)
    cam = front_camera()
    fx = make_fixture(4)
    params = fx.deformation
    delta = deform(params, cloud.position, 0.4)
    adj = Raster(*[np.random.default_rng(6).normal(size=s) for s in ((16, 16, 3), (16, 16), (16, 16), (16, 16))])
    grads = render_backward(render(cloud, cam, delta).record, adj)

    def inner(r):
        return float(np.sum(r.rgb * adj.rgb) + np.sum(r.depth * adj.depth) + np.sum(r.ti * adj.ti)
                     + np.sum(r.alpha * adj.alpha))

    def fn(x):
        c = cloud.copy()
        c.position = x.reshape(c.position.shape)
        return inner(render(c, cam, delta))   # offsets held fixed: the encoding path is cut

    assert check_array("render", "position", fn, cloud.position, grads.position).passed
    np.testing.assert_array_equal(grads.position, grads.dx)


# --- apply -------------------------------------------------------------------------

def test_apply_zero_delta_is_canonical():
    cloud = random_cloud(6, seed=2)
    a, base = apply(cloud, Delta.zeros(6, np.float64)).activated(), activate(cloud)
    for name in ("position", "scale", "rotation", "opacity", "color", "ti"):
        np.testing.assert_array_equal(getattr(a, name), getattr(base, name))
    assert apply(cloud, Delta.zeros(6, np.float64)).scale_active.all()


def test_apply_scale_offset_sets_effective_scale():
    cloud = random_cloud(4, seed=3)
    target = np.full((4, 3), 0.05)
    s = activate(cloud).scale
    d = Delta(np.zeros((4, 3)), np.zeros((4, 4)), target - s)
    np.testing.assert_allclose(apply(cloud, d).scale, target, atol=1e-15)


def test_apply_clamps_negative_scales():
    cloud = random_cloud(2, seed=3)
    d = Delta(np.zeros((2, 3)), np.zeros((2, 4)), np.full((2, 3), -10.0))
    out = apply(cloud, d)
    assert np.all(out.scale == MIN_SCALE) and not out.scale_active.any()


def test_apply_count_mismatch():
    with pytest.raises(ValueError, match="deformation has 3 entries"):
        apply(random_cloud(2), Delta.zeros(3, np.float64))


def test_apply_translation_and_rotation_offsets():
    cloud = random_cloud(3, seed=8)
    rng = np.random.default_rng(9)
    d = Delta(rng.normal(size=(3, 3)), rng.normal(size=(3, 4)), np.zeros((3, 3)))
    out = apply(cloud, d)
    np.testing.assert_array_equal(out.position, cloud.position + d.dx)
    np.testing.assert_array_equal(out.rotation, cloud.rotation + d.dr)
