import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import front_camera
from texsplat.io import (FrameEntry, Manifest, ManifestError, PFMError, atomic_write_bytes, decode_pfm, encode_pfm,
                        encode_png, read_manifest, read_pfm, read_png, to_uint8, write_manifest, write_pfm,
                        write_png)
from texsplat.scene import look_at


# --- PNG -------------------------------------------------------------------------------

def test_png_roundtrip_uint8_exact(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (17, 23, 3), dtype=np.uint8)
    write_png(tmp_path / "a.png", img)
    assert np.array_equal(read_png(tmp_path / "a.png", as_float=False), img)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 7, 3), elements=st.floats(0, 1)))
def test_png_float_quantization(img):
    back = np.asarray(__import__("PIL.Image", fromlist=["Image"]).open(__import__("io").BytesIO(encode_png(img))))
    assert np.max(np.abs(back / 255.0 - img)) <= 0.5 / 255 + 1e-12


def test_to_uint8_clips():
    assert list(to_uint8(np.array([-0.2, 0.0, 0.5, 1.0, 3.0]))) == [0, 0, 128, 255, 255]


def test_png_encoding_is_deterministic():
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    assert encode_png(img) == encode_png(img.copy())


# --- PFM -------------------------------------------------------------------------------

def test_pfm_roundtrip_exact(tmp_path):
    d = np.random.default_rng(2).normal(size=(9, 13)).astype(np.float32)
    d[0, 0], d[1, 1] = np.inf, -0.0
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32 and back.tobytes() == d.tobytes()
    rgb = np.random.default_rng(3).normal(size=(4, 5, 3)).astype(np.float32)
    assert decode_pfm(encode_pfm(rgb)).tobytes() == rgb.tobytes()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(allow_nan=False, width=32)))
def test_pfm_roundtrip_property(d):
    assert decode_pfm(encode_pfm(d)).tobytes() == d.tobytes()


def test_pfm_layout():
    d = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
    data = encode_pfm(d)
    assert data.startswith(b"Pf\n2 2\n-1.0\n")
    # bottom row first, little-endian
    assert data[-16:] == np.array([3, 4, 1, 2], "<f4").tobytes()


def test_pfm_big_endian_readable():
    d = np.array([[1.5, -2.0]], np.float32)
    data = b"Pf\n2 1\n1.0\n" + d.astype(">f4").tobytes()
    np.testing.assert_array_equal(decode_pfm(data), d)


@pytest.mark.parametrize("data", [b"", b"P6\n2 2\n-1.0\n" + bytes(16), b"Pf\n2 2\n-1.0\n" + bytes(15),
                                  b"Pf\n2 2\n-1.0\n" + bytes(17), b"Pf\nx 2\n-1.0\n" + bytes(16)])
def test_pfm_corrupted(data):
    with pytest.raises(PFMError):
        decode_pfm(data)


def test_pfm_rejects_bad_shape():
    with pytest.raises(PFMError):
        encode_pfm(np.zeros((2, 2, 2)))


# --- manifest -------------------------------------------------------------------------

def _manifest():
    cams = [front_camera(32, t=0.0), front_camera(32, t=0.25)]
    cams.append(type(cams[0])(40.0, 41.5, 15.5, 16.0, 32, 30, look_at([1.0, 2.0, -3.0], [0.1, 0.0, 0.2]), t=1 / 3))
    frames = [FrameEntry(c, f"images/{i}.png", f"depth/{i}.pfm", "eval" if i == 2 else "train", i)
              for i, c in enumerate(cams)]
    return Manifest(frames, "abc123", (-1.0, -0.5, -2.0), (1.0, 0.5, 2.0), {"note": [1, 2]})


def test_manifest_roundtrip_exact(tmp_path):
    m = _manifest()
    write_manifest(tmp_path / "m.json", m)
    back = read_manifest(tmp_path / "m.json")
    assert back.scene_id == m.scene_id and back.bbox_min == m.bbox_min and back.extra == m.extra
    for a, b in zip(back.frames, m.frames):
        assert (a.image, a.depth, a.split, a.index) == (b.image, b.depth, b.split, b.index)
        assert a.camera.to_dict() == b.camera.to_dict()
        assert a.camera.world_to_camera.tobytes() == b.camera.world_to_camera.tobytes()
        assert a.camera.t == b.camera.t
    write_manifest(tmp_path / "m2.json", back)
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert [f.index for f in back.split("eval")] == [2]


def test_manifest_documented_keys(tmp_path):
    write_manifest(tmp_path / "m.json", _manifest())
    d = json.loads((tmp_path / "m.json").read_text())
    frame = d["frames"][0]
    for key in ("fx", "fy", "cx", "cy", "width", "height", "pose", "time", "split", "image", "depth"):
        assert key in frame
    assert len(frame["pose"]) == 16


def test_empty_manifest_roundtrip(tmp_path):
    write_manifest(tmp_path / "m.json", Manifest([]))
    assert read_manifest(tmp_path / "m.json").frames == []


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d.update(version=99), "version"),
    (lambda d: d["frames"][0].pop("image"), "missing key"),
    (lambda d: d["frames"][1].update(pose=[0.0] * 12), "16 floats"),
])
def test_manifest_corrupted(tmp_path, mutate, message):
    write_manifest(tmp_path / "m.json", _manifest())
    d = json.loads((tmp_path / "m.json").read_text())
    mutate(d)
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError, match=message):
        read_manifest(tmp_path / "m.json")


def test_manifest_not_json(tmp_path):
    (tmp_path / "m.json").write_text("{frames: ")
    with pytest.raises(ManifestError, match="not valid JSON"):
        read_manifest(tmp_path / "m.json")


# --- atomic writes -------------------------------------------------------------------

def test_atomic_write_leaves_no_partial_file(tmp_path):
    with pytest.raises(OSError):
        atomic_write_bytes(tmp_path / "nodir" / "x.bin", b"abc")
    target = tmp_path / "x.bin"
    target.write_bytes(b"old")
    with pytest.raises(TypeError):
        atomic_write_bytes(target, "not bytes")
    assert target.read_bytes() == b"old"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x.bin"]
