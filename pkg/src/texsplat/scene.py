"""Gaussian cloud, pinhole cameras, parameter activations and the checkpoint container."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

MAGIC_PREFIX = b"S4DGS\0"
MAGIC_VERSION = b"v1"
MAGIC = MAGIC_PREFIX + MAGIC_VERSION

# field order is part of the on-disk format
RAW_FIELDS = ("position", "raw_scale", "rotation", "raw_opacity", "color", "raw_ti")
FIELD_WIDTH = {"position": 3, "raw_scale": 3, "rotation": 4, "raw_opacity": 1, "color": 3, "raw_ti": 1}


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MalformedHeaderError(CheckpointError):
    pass


def sigmoid(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    # stable for large |x| of either sign
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Canonical scene: raw (pre-activation) per-Gaussian storage.

    ``rotation`` is an unnormalized quaternion in (w, x, y, z) order.
    """

    position: np.ndarray
    raw_scale: np.ndarray
    rotation: np.ndarray
    raw_opacity: np.ndarray
    color: np.ndarray
    raw_ti: np.ndarray

    def __post_init__(self):
        n = len(self.position)
        for name in RAW_FIELDS:
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"field {name!r} has length {len(arr)}, expected {n}")
            width = FIELD_WIDTH[name]
            expected = (n,) if width == 1 else (n, width)
            if arr.shape != expected:
                raise ValueError(f"field {name!r} has shape {arr.shape}, expected {expected}")

    @property
    def count(self) -> int:
        return len(self.position)

    @property
    def dtype(self):
        return self.position.dtype

    @classmethod
    def empty(cls, dtype=np.float32) -> "GaussianCloud":
        return cls(**{
            name: np.zeros((0,) if FIELD_WIDTH[name] == 1 else (0, FIELD_WIDTH[name]), dtype=dtype)
            for name in RAW_FIELDS
        })

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(**{name: getattr(self, name).astype(dtype) for name in RAW_FIELDS})

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(**{name: getattr(self, name).copy() for name in RAW_FIELDS})

    def subset(self, keep) -> "GaussianCloud":
        return GaussianCloud(**{name: getattr(self, name)[keep] for name in RAW_FIELDS})

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in RAW_FIELDS}


@dataclass
class Activated:
    """Activated per-Gaussian views; never aliases raw storage."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    ti: np.ndarray


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(q, axis=-1)
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        raise ValueError(f"zero-norm quaternion at Gaussian index {int(bad[0])}")
    return q / norms[..., None]


def activate(cloud: GaussianCloud) -> Activated:
    return Activated(
        position=cloud.position.copy(),
        scale=np.exp(cloud.raw_scale),
        rotation=normalize_quaternions(cloud.rotation),
        opacity=sigmoid(cloud.raw_opacity),
        color=cloud.color.copy(),
        ti=sigmoid(cloud.raw_ti),
    )


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z); batched over leading axes."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_to_matrix_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q) back onto the (unit) quaternion components."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2]
              - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def quaternion_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def axis_angle_quaternion(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def covariance(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s) diag(s) R^T for unit quaternions; batched over leading axes."""
    M = quaternion_to_matrix(rotation) * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    t: float = 0.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.width < 8 or self.height < 8:
            raise ValueError(f"camera raster must be at least 8x8, got {self.width}x{self.height}")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("world_to_camera rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "pose": [float(v) for v in self.world_to_camera.reshape(-1)],
            "time": float(self.t),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"], width=int(d["width"]),
                   height=int(d["height"]), world_to_camera=np.asarray(d["pose"], dtype=np.float64),
                   t=float(d.get("time", 0.0)))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix, camera looking down +z with +y pointing down the image."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    return T


def init_cloud(count: int, bbox_min, bbox_max, seed: int, dtype=np.float32) -> GaussianCloud:
    """Volume-filling initialization inside an axis-aligned box."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    if count <= 0:
        return GaussianCloud.empty(dtype)
    rng = np.random.default_rng(seed)
    diag = float(np.linalg.norm(hi - lo))
    position = rng.uniform(lo, hi, size=(count, 3))
    raw_scale = np.full((count, 3), math.log(0.05 * diag / count ** (1 / 3)))
    rotation = np.tile([1.0, 0.0, 0.0, 0.0], (count, 1))
    color = rng.uniform(0.0, 1.0, size=(count, 3))
    return GaussianCloud(
        position=position.astype(dtype),
        raw_scale=raw_scale.astype(dtype),
        rotation=rotation.astype(dtype),
        raw_opacity=np.full(count, logit(0.1), dtype=dtype),
        color=color.astype(dtype),
        raw_ti=np.full(count, logit(0.5), dtype=dtype),
    )


# --- checkpoint container -------------------------------------------------

def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"truncated payload while reading {what}: "
                                       f"wanted {n} bytes, got {len(data)}")
    return data


def encode_checkpoint(cloud: GaussianCloud, deformation_params=None, metadata: dict | None = None) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<Q", cloud.count))
    for name in RAW_FIELDS:
        out.write(np.ascontiguousarray(getattr(cloud, name), dtype="<f4").tobytes())
    block = deformation_params.to_bytes() if deformation_params is not None else b""
    out.write(struct.pack("<Q", len(block)))
    out.write(block)
    if metadata:
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
        out.write(struct.pack("<Q", len(meta)))
        out.write(meta)
    return out.getvalue()


def decode_checkpoint(data: bytes):
    from .deformation import DeformationParams  # deferred: deformation imports this module

    buf = io.BytesIO(data)
    head = buf.read(len(MAGIC))
    if len(head) < len(MAGIC) or not head.startswith(MAGIC_PREFIX):
        if len(head) < len(MAGIC) and MAGIC.startswith(head) and head:
            raise TruncatedCheckpointError("truncated payload inside the magic header")
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, found {head!r}")
    if head[len(MAGIC_PREFIX):] != MAGIC_VERSION:
        raise VersionMismatchError(f"version mismatch: file is {head[len(MAGIC_PREFIX):]!r}, "
                                   f"reader supports {MAGIC_VERSION!r}")
    (count,) = struct.unpack("<Q", _read_exact(buf, 8, "count"))
    remaining = len(data) - buf.tell()
    per_gaussian = 4 * sum(FIELD_WIDTH.values())
    if count > remaining // per_gaussian:
        raise TruncatedCheckpointError(f"truncated payload: header declares {count} Gaussians "
                                       f"but only {remaining} bytes follow")
    arrays = {}
    for name in RAW_FIELDS:
        width = FIELD_WIDTH[name]
        raw = _read_exact(buf, 4 * width * count, name)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
        arrays[name] = arr.reshape((count,) if width == 1 else (count, width))
    cloud = GaussianCloud(**arrays)
    (block_len,) = struct.unpack("<Q", _read_exact(buf, 8, "deformation block length"))
    block = _read_exact(buf, block_len, "deformation block")
    params = DeformationParams.from_bytes(block) if block_len else None
    metadata = None
    tail = buf.read(8)
    if tail:
        if len(tail) != 8:
            raise MalformedHeaderError("malformed header: dangling bytes after deformation block")
        (meta_len,) = struct.unpack("<Q", tail)
        try:
            metadata = json.loads(_read_exact(buf, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedHeaderError(f"malformed header: metadata block is not JSON ({exc})") from exc
        if buf.read(1):
            raise MalformedHeaderError("malformed header: trailing bytes after metadata block")
    return cloud, params, metadata


def save_checkpoint(cloud: GaussianCloud, deformation_params, path, metadata: dict | None = None) -> None:
    from .io import atomic_write_bytes  # deferred: io imports this module

    atomic_write_bytes(path, encode_checkpoint(cloud, deformation_params, metadata))


def load_checkpoint(path, with_metadata: bool = False):
    with open(path, "rb") as f:
        data = f.read()
    cloud, params, metadata = decode_checkpoint(data)
    if with_metadata:
        return cloud, params, metadata
    return cloud, params


def clouds_equal(a: GaussianCloud, b: GaussianCloud) -> bool:
    return all(
        getattr(a, f.name).dtype == getattr(b, f.name).dtype
        and getattr(a, f.name).tobytes() == getattr(b, f.name).tobytes()
        for f in fields(a)
    )
