"""Synthetic dynamic scenes rendered by the project's own rasterizer.

Ground truth is itself a Gaussian cloud: a static textured slab plus a
textured sphere that moves rigidly over normalized time. Because the same
rasterizer renders both ground truth and reconstructions, every dataset is
realizable up to 8-bit quantization.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .io import FrameEntry, Manifest, write_manifest, write_pfm, write_png
from .raster import RenderSettings, render
from .scene import (Camera, GaussianCloud, axis_angle_quaternion, logit, look_at, quaternion_multiply,
                    quaternion_to_matrix, save_checkpoint)

PATTERNS = ("checker", "stripes", "speckle")


@dataclass
class SceneSpec:
    seed: int = 0
    gaussian_count: int = 1000
    bbox_min: tuple = (-1.2, -0.9, -1.2)
    bbox_max: tuple = (1.2, 0.9, 1.2)
    pattern: str = "checker"
    moving_fraction: float = 0.45
    translation_amplitude: tuple = (0.35, 0.0, 0.0)
    rotation_amplitude: float = 0.8       # radians about the vertical axis
    camera_radius: float = 3.8
    camera_elevation: float = 0.45        # radians
    camera_arc: float = 1.0               # azimuth span over t in [0, 1], radians
    eval_elevation_offset: float = 0.12
    fov_deg: float = 45.0
    n_train: int = 10
    n_eval: int = 4
    width: int = 96
    height: int = 96
    opacity: float = 0.95

    def __post_init__(self):
        self.bbox_min = tuple(float(v) for v in self.bbox_min)
        self.bbox_max = tuple(float(v) for v in self.bbox_max)
        self.translation_amplitude = tuple(float(v) for v in self.translation_amplitude)

    @property
    def is_static(self) -> bool:
        return self.rotation_amplitude == 0 and not any(self.translation_amplitude)

    def scene_id(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class DepthProxyConfig:
    scale_range: tuple = (0.5, 2.0)
    shift_range: tuple = (-1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if not self.scale_range[0] > 0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError("depth proxy scale range must be positive and ordered")


@dataclass
class Trajectory:
    """Rigid motion of the moving subset: pos -> center + T(t) + R(t) (pos - center)."""

    moving: np.ndarray
    center: np.ndarray
    translation_amplitude: np.ndarray
    rotation_amplitude: float

    def phase(self, t: float) -> float:
        return math.sin(math.pi * (t - 0.5))

    def pose(self, cloud: GaussianCloud, t: float) -> GaussianCloud:
        s = self.phase(t)
        q = axis_angle_quaternion([0.0, 1.0, 0.0], self.rotation_amplitude * s)
        R = quaternion_to_matrix(q)
        out = cloud.copy()
        m = self.moving
        pos = cloud.position[m].astype(np.float64)
        out.position[m] = (self.center + s * self.translation_amplitude
                           + (pos - self.center) @ R.T).astype(cloud.dtype)
        out.rotation[m] = quaternion_multiply(q[None, :], cloud.rotation[m].astype(np.float64)).astype(cloud.dtype)
        return out


def _frame_quaternion(normal: np.ndarray) -> np.ndarray:
    """Quaternions whose rotation maps the local z axis onto ``normal``."""
    helper = np.where(np.abs(normal[:, [0]]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    t1 = np.cross(helper, normal)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(normal, t1)
    R = np.stack([t1, t2, normal], axis=2)  # columns
    # standard matrix -> quaternion conversion, branch on the largest diagonal term
    q = np.empty((len(R), 4))
    for i, m in enumerate(R):
        tr = np.trace(m)
        if tr > 0:
            s = 2 * math.sqrt(tr + 1)
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2 * math.sqrt(1 + m[0, 0] - m[1, 1] - m[2, 2])
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2 * math.sqrt(1 + m[1, 1] - m[0, 0] - m[2, 2])
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2 * math.sqrt(1 + m[2, 2] - m[0, 0] - m[1, 1])
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return q


def _sample_box(rng, n, lo, hi):
    lo, hi = np.asarray(lo), np.asarray(hi)
    size = hi - lo
    areas = np.array([size[1] * size[2], size[1] * size[2], size[0] * size[2],
                      size[0] * size[2], size[0] * size[1], size[0] * size[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(lo, hi, size=(n, 3))
    normals = np.zeros((n, 3))
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 1, hi[axis], lo[axis])
    normals[np.arange(n), axis] = np.where(side == 1, 1.0, -1.0)
    return pts, normals, float(areas.sum())


def _sample_sphere(rng, n, center, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v, v, 4 * math.pi * radius ** 2


def _colors(rng, pattern, pts, palette, cell):
    if pattern == "checker":
        parity = np.floor(pts / cell).astype(int).sum(axis=1) % 2
    elif pattern == "stripes":
        parity = np.floor(pts[:, 0] / cell).astype(int) % 2
    else:
        return rng.uniform(0.05, 0.95, size=(len(pts), 3))
    return np.where(parity[:, None] == 1, palette[0], palette[1])


def generate_scene(spec: SceneSpec) -> tuple[GaussianCloud, Trajectory]:
    if spec.gaussian_count <= 0:
        raise ValueError("degenerate scene spec: gaussian_count must be positive")
    lo, hi = np.asarray(spec.bbox_min), np.asarray(spec.bbox_max)
    if np.any(hi <= lo):
        raise ValueError("degenerate scene spec: empty bounding box")
    if spec.pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {spec.pattern!r}; expected one of {PATTERNS}")
    rng = np.random.default_rng(spec.seed)
    n = spec.gaussian_count
    n_move = int(round(n * spec.moving_fraction))
    n_static = n - n_move

    extent = hi - lo
    slab_lo = lo + extent * np.array([0.12, 0.08, 0.12])
    slab_hi = np.array([hi[0] - extent[0] * 0.12, lo[1] + extent[1] * 0.3, hi[2] - extent[2] * 0.12])
    center = np.array([0.5 * (lo[0] + hi[0]), slab_hi[1] + 0.3 * extent[1], 0.5 * (lo[2] + hi[2])])
    radius = 0.2 * float(min(extent))

    p_static, n_s, area_s = _sample_box(rng, n_static, slab_lo, slab_hi)
    p_move, n_m, area_m = _sample_sphere(rng, n_move, center, radius)
    # cells span several Gaussian spacings so the pattern is representable
    c_static = _colors(rng, spec.pattern, p_static, np.array([[0.92, 0.82, 0.25], [0.12, 0.32, 0.75]]),
                       0.25 * float(min(extent)))
    c_move = _colors(rng, spec.pattern, p_move, np.array([[0.85, 0.2, 0.2], [0.95, 0.95, 0.9]]), 0.4 * radius)

    def scales(count, area):
        tangent = 0.75 * math.sqrt(area / max(count, 1))
        return np.tile([tangent, tangent, 0.15 * tangent], (count, 1))

    position = np.concatenate([p_static, p_move])
    normals = np.concatenate([n_s, n_m])
    scale = np.concatenate([scales(n_static, area_s), scales(n_move, area_m)])
    cloud = GaussianCloud(
        position=position.astype(np.float32),
        raw_scale=np.log(scale).astype(np.float32),
        rotation=_frame_quaternion(normals).astype(np.float32),
        raw_opacity=np.full(n, logit(spec.opacity), dtype=np.float32),
        color=np.clip(np.concatenate([c_static, c_move]), 0, 1).astype(np.float32),
        raw_ti=np.zeros(n, dtype=np.float32),
    )
    moving = np.zeros(n, dtype=bool)
    moving[n_static:] = True
    traj = Trajectory(moving, center, np.asarray(spec.translation_amplitude, dtype=np.float64),
                      float(spec.rotation_amplitude))
    return cloud, traj


def frame_times(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Train timestamps span [0, 1]; eval timestamps sit between train timestamps."""
    if spec.n_train < 2:
        raise ValueError("need at least two training frames")
    train = np.linspace(0.0, 1.0, spec.n_train)
    gaps = np.round(np.linspace(0, spec.n_train - 2, spec.n_eval)).astype(int) if spec.n_eval else np.array([], int)
    evals = (train[gaps] + train[gaps + 1]) / 2
    return train, evals


def orbit_camera(spec: SceneSpec, t: float, elevation_offset: float = 0.0) -> Camera:
    lo, hi = np.asarray(spec.bbox_min), np.asarray(spec.bbox_max)
    # aim at the slab centre
    target = np.array([0.5 * (lo[0] + hi[0]), lo[1] + 0.15 * (hi[1] - lo[1]), 0.5 * (lo[2] + hi[2])])
    az = spec.camera_arc * (t - 0.5)
    el = spec.camera_elevation + elevation_offset
    eye = target + spec.camera_radius * np.array([math.sin(az) * math.cos(el), math.sin(el),
                                                  -math.cos(az) * math.cos(el)])
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    return Camera(fx=f, fy=f, cx=(spec.width - 1) / 2, cy=(spec.height - 1) / 2,
                  width=spec.width, height=spec.height, world_to_camera=look_at(eye, target), t=float(t))


def dataset_cameras(spec: SceneSpec) -> list[tuple[Camera, str]]:
    train, evals = frame_times(spec)
    cams = [(orbit_camera(spec, t), "train") for t in train]
    cams += [(orbit_camera(spec, t, spec.eval_elevation_offset), "eval") for t in evals]
    return cams


def render_frame(gt_cloud: GaussianCloud, trajectory: Trajectory, camera: Camera,
                 settings: RenderSettings | None = None):
    posed = trajectory.pose(gt_cloud.astype(np.float64), camera.t)
    return render(posed, camera, settings=settings)


def visible_fraction(gt_cloud: GaussianCloud, trajectory: Trajectory, spec: SceneSpec,
                     threshold: float = 0.9) -> float:
    """Fraction of pixels with alpha above ``threshold`` in the central training frame."""
    raster = render_frame(gt_cloud, trajectory, orbit_camera(spec, 0.5))
    return float(np.mean(raster.alpha > threshold))


def depth_proxy(gt_depth: np.ndarray, frame_index: int, cfg: DepthProxyConfig) -> np.ndarray:
    """Per-frame positive-affine perturbation a * depth + b, deterministic in (seed, frame)."""
    rng = np.random.default_rng([cfg.seed, frame_index])
    a = rng.uniform(*cfg.scale_range)
    b = rng.uniform(*cfg.shift_range)
    return (a * np.asarray(gt_depth, dtype=np.float64) + b).astype(np.asarray(gt_depth).dtype)


def render_dataset(gt_cloud: GaussianCloud, trajectory: Trajectory, spec: SceneSpec, out_dir) -> Manifest:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (cam, split) in enumerate(dataset_cameras(spec)):
        raster = render_frame(gt_cloud, trajectory, cam)
        image = f"images/frame_{i:03d}.png"
        depth = f"depth/frame_{i:03d}.pfm"
        write_png(out / image, raster.rgb)
        write_pfm(out / depth, raster.depth)
        entries.append(FrameEntry(cam, image, depth, split, i))
    manifest = Manifest(entries, spec.scene_id(), spec.bbox_min, spec.bbox_max,
                        {"spec": asdict(spec)})
    write_manifest(out / "manifest.json", manifest)
    return manifest


def synthesize(spec: SceneSpec, out_dir) -> Manifest:
    """Generate the scene, render every frame, and store the canonical GT cloud."""
    gt, traj = generate_scene(spec)
    manifest = render_dataset(gt, traj, spec, out_dir)
    save_checkpoint(gt, None, Path(out_dir) / "gt_checkpoint.bin", {"scene_id": spec.scene_id()})
    return manifest
