"""Image, depth-map and manifest files."""
from __future__ import annotations

import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Camera

MANIFEST_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so failures leave no partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# --- PNG ---------------------------------------------------------------------

def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_png(rgb: np.ndarray) -> bytes:
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, encode_png(rgb))


def read_png(path, as_float: bool = True) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float64) / 255.0 if as_float else arr


# --- PFM ---------------------------------------------------------------------

class PFMError(ValueError):
    pass


def encode_pfm(values: np.ndarray) -> bytes:
    """Portable float map, little-endian (scale -1.0), rows stored bottom-to-top."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim == 2:
        kind = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        kind = b"PF"
    else:
        raise PFMError(f"PFM holds HxW or HxWx3 arrays, got shape {arr.shape}")
    H, W = arr.shape[:2]
    header = kind + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n"
    return header + np.ascontiguousarray(arr[::-1]).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise PFMError("malformed PFM header")
    kind, W, H, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    need = W * H * channels * 4
    payload = data[m.end():]
    if len(payload) != need:
        raise PFMError(f"PFM payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    arr = arr.reshape((H, W, 3) if channels == 3 else (H, W))
    return arr[::-1].copy()


def write_pfm(path, values: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pfm(values))


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pfm(f.read())


# --- manifest ----------------------------------------------------------------

class ManifestError(ValueError):
    pass


@dataclass
class FrameEntry:
    camera: Camera
    image: str
    depth: str
    split: str
    index: int


@dataclass
class Manifest:
    frames: list
    scene_id: str = ""
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    extra: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]


def manifest_to_dict(manifest: Manifest) -> dict:
    frames = []
    for fr in manifest.frames:
        d = fr.camera.to_dict()
        d.update(image=fr.image, depth=fr.depth, split=fr.split, index=fr.index)
        frames.append(d)
    return {
        "version": MANIFEST_VERSION,
        "scene_id": manifest.scene_id,
        "bbox_min": [float(v) for v in manifest.bbox_min],
        "bbox_max": [float(v) for v in manifest.bbox_max],
        "extra": manifest.extra,
        "frames": frames,
    }


def manifest_from_dict(d: dict) -> Manifest:
    if d.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {d.get('version')!r}")
    frames = []
    for i, fd in enumerate(d.get("frames", [])):
        try:
            if len(fd["pose"]) != 16:
                raise ManifestError(f"frame {i}: pose must have 16 floats")
            frames.append(FrameEntry(Camera.from_dict(fd), fd["image"], fd["depth"], fd["split"],
                                     int(fd.get("index", i))))
        except KeyError as exc:
            raise ManifestError(f"frame {i}: missing key {exc.args[0]!r}") from exc
    return Manifest(frames, d.get("scene_id", ""), tuple(d.get("bbox_min", (-1, -1, -1))),
                    tuple(d.get("bbox_max", (1, 1, 1))), d.get("extra", {}))


def write_manifest(path, manifest: Manifest) -> None:
    text = json.dumps(manifest_to_dict(manifest), indent=1, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def read_manifest(path) -> Manifest:
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    return manifest_from_dict(d)
