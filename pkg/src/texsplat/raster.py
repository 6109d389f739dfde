"""Differentiable perspective splatting of Gaussian clouds.

Each render produces four channels (rgb, depth, texture intensity, alpha) by
front-to-back alpha compositing of projected 2D Gaussians, and keeps a
record from which :func:`render_backward` computes the exact vector-Jacobian
product for every Gaussian attribute.

Per-pixel work runs in numba kernels over square screen tiles. The kernels
accumulate in double precision and traverse tiles and per-tile lists in a
fixed order, so renders and gradients are deterministic and do not depend
on the storage order of the cloud (ties in depth break by index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .deformation import Delta, Deformed, apply
from .scene import Camera, GaussianCloud, quaternion_to_matrix, quaternion_to_matrix_vjp


@dataclass
class RenderSettings:
    background: tuple = (0.0, 0.0, 0.0)
    ti_background: float = 0.0
    depth_background: float = 0.0
    z_near: float = 0.01
    cov_floor: float = 0.3
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    min_transmittance: float = 1e-4
    tile: int = 8


@dataclass
class Raster:
    rgb: np.ndarray
    depth: np.ndarray
    ti: np.ndarray
    alpha: np.ndarray
    record: object = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    @classmethod
    def zeros(cls, height: int, width: int, dtype=np.float64) -> "Raster":
        return cls(np.zeros((height, width, 3), dtype), np.zeros((height, width), dtype),
                   np.zeros((height, width), dtype), np.zeros((height, width), dtype))


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    z: float
    index: int


@dataclass
class CloudGrads:
    position: np.ndarray
    raw_scale: np.ndarray
    rotation: np.ndarray
    raw_opacity: np.ndarray
    color: np.ndarray
    raw_ti: np.ndarray
    dx: np.ndarray | None = None
    dr: np.ndarray | None = None
    ds: np.ndarray | None = None

    def groups(self) -> dict:
        out = {k: getattr(self, k) for k in ("position", "raw_scale", "rotation", "raw_opacity", "color", "raw_ti")}
        if self.dx is not None:
            out.update(dx=self.dx, dr=self.dr, ds=self.ds)
        return out


def _perspective_jacobian(camera: Camera, p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (2, 3), dtype=p.dtype)
    J[..., 0, 0] = camera.fx / z
    J[..., 0, 2] = -camera.fx * x / (z * z)
    J[..., 1, 1] = camera.fy / z
    J[..., 1, 2] = -camera.fy * y / (z * z)
    return J


def _project_batch(camera: Camera, means: np.ndarray, cov3d: np.ndarray, cov_floor: float):
    W = camera.rotation.astype(means.dtype)
    p = means @ W.T + camera.translation.astype(means.dtype)
    z = p[:, 2]
    safe_z = np.where(z > 0, z, 1)
    mean2d = np.stack([camera.fx * p[:, 0] / safe_z + camera.cx,
                       camera.fy * p[:, 1] / safe_z + camera.cy], axis=1)
    J = _perspective_jacobian(camera, np.concatenate([p[:, :2], safe_z[:, None]], axis=1))
    cov_cam = W @ cov3d @ W.T
    cov2d = J @ cov_cam @ np.swapaxes(J, -1, -2)
    cov2d[:, 0, 0] += cov_floor
    cov2d[:, 1, 1] += cov_floor
    return p, mean2d, J, cov_cam, cov2d


def project(camera: Camera, mean, cov3d, settings: RenderSettings | None = None) -> ProjectedGaussian | None:
    """Project one Gaussian; ``None`` when it lies at or in front of the near plane."""
    settings = settings or RenderSettings()
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3)
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(1, 3, 3)
    p, mean2d, _, _, cov2d = _project_batch(camera, mean, cov3d, settings.cov_floor)
    if p[0, 2] <= settings.z_near:
        return None
    return ProjectedGaussian(mean2d[0], cov2d[0], float(p[0, 2]), 0)


# --- numba kernels ----------------------------------------------------------

@njit(cache=True)
def _bin_tiles(order, px0, px1, py0, py1, tile, n_tiles_x, n_tiles):
    counts = np.zeros(n_tiles + 1, np.int64)
    for g in order:
        for ty in range(py0[g] // tile, py1[g] // tile + 1):
            for tx in range(px0[g] // tile, px1[g] // tile + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    ids = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for g in order:
        for ty in range(py0[g] // tile, py1[g] // tile + 1):
            for tx in range(px0[g] // tile, px1[g] // tile + 1):
                t = ty * n_tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@njit(cache=True, inline="always")
def _alpha(gi, px, py, mean2d, conic, opac):
    dx = mean2d[gi, 0] - px
    dy = mean2d[gi, 1] - py
    power = -0.5 * (conic[gi, 0] * dx * dx + conic[gi, 2] * dy * dy) - conic[gi, 1] * dx * dy
    gauss = math.exp(power)
    return dx, dy, gauss, opac[gi] * gauss


@njit(cache=True)
def _forward_kernel(H, W, tile, n_tiles_x, offsets, ids, box, mean2d, conic, opac, color, depth, ti,
                    bg, ti_bg, depth_bg, alpha_max, alpha_min, t_min,
                    out_rgb, out_depth, out_ti, out_alpha, out_T, out_last):
    n_tiles_y = (H + tile - 1) // tile
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            start = offsets[t]
            end = offsets[t + 1]
            for py in range(ty * tile, min(H, (ty + 1) * tile)):
                for px in range(tx * tile, min(W, (tx + 1) * tile)):
                    T = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    d = 0.0
                    s = 0.0
                    last = start
                    for k in range(start, end):
                        gi = ids[k]
                        if px < box[gi, 0] or px > box[gi, 1] or py < box[gi, 2] or py > box[gi, 3]:
                            continue
                        dx, dy, gauss, a = _alpha(gi, px, py, mean2d, conic, opac)
                        if a > alpha_max:
                            a = alpha_max
                        if a < alpha_min:
                            continue
                        w = a * T
                        r += color[gi, 0] * w
                        g += color[gi, 1] * w
                        b += color[gi, 2] * w
                        d += depth[gi] * w
                        s += ti[gi] * w
                        T = T * (1.0 - a)
                        last = k + 1
                        if T < t_min:
                            break
                    out_rgb[py, px, 0] = r + T * bg[0]
                    out_rgb[py, px, 1] = g + T * bg[1]
                    out_rgb[py, px, 2] = b + T * bg[2]
                    out_depth[py, px] = d + T * depth_bg
                    out_ti[py, px] = s + T * ti_bg
                    out_alpha[py, px] = 1.0 - T
                    out_T[py, px] = T
                    out_last[py, px] = last


@njit(cache=True)
def _backward_kernel(H, W, tile, n_tiles_x, offsets, ids, box, mean2d, conic, opac, color, depth, ti,
                     bg, ti_bg, depth_bg, alpha_max, alpha_min, out_T, out_last,
                     g_rgb, g_depth, g_ti, g_alpha,
                     d_mean2d, d_conic, d_opac, d_color, d_depth, d_ti):
    n_tiles_y = (H + tile - 1) // tile
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            start = offsets[t]
            for py in range(ty * tile, min(H, (ty + 1) * tile)):
                for px in range(tx * tile, min(W, (tx + 1) * tile)):
                    gr = g_rgb[py, px, 0]
                    gg = g_rgb[py, px, 1]
                    gb = g_rgb[py, px, 2]
                    gd = g_depth[py, px]
                    gt = g_ti[py, px]
                    ga = g_alpha[py, px]
                    if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and gt == 0.0 and ga == 0.0:
                        continue
                    T = out_T[py, px]
                    # composite of everything behind the current Gaussian
                    br = bg[0]
                    bgc = bg[1]
                    bb = bg[2]
                    bd = depth_bg
                    bt = ti_bg
                    ba = 0.0
                    for k in range(out_last[py, px] - 1, start - 1, -1):
                        gi = ids[k]
                        if px < box[gi, 0] or px > box[gi, 1] or py < box[gi, 2] or py > box[gi, 3]:
                            continue
                        dx, dy, gauss, a = _alpha(gi, px, py, mean2d, conic, opac)
                        clamped = a > alpha_max
                        if clamped:
                            a = alpha_max
                        if a < alpha_min:
                            continue
                        T = T / (1.0 - a)
                        w = a * T
                        c0 = color[gi, 0]
                        c1 = color[gi, 1]
                        c2 = color[gi, 2]
                        z = depth[gi]
                        s = ti[gi]
                        d_color[gi, 0] += w * gr
                        d_color[gi, 1] += w * gg
                        d_color[gi, 2] += w * gb
                        d_depth[gi] += w * gd
                        d_ti[gi] += w * gt
                        dl_da = T * ((c0 - br) * gr + (c1 - bgc) * gg + (c2 - bb) * gb
                                     + (z - bd) * gd + (s - bt) * gt + (1.0 - ba) * ga)
                        br = a * c0 + (1.0 - a) * br
                        bgc = a * c1 + (1.0 - a) * bgc
                        bb = a * c2 + (1.0 - a) * bb
                        bd = a * z + (1.0 - a) * bd
                        bt = a * s + (1.0 - a) * bt
                        ba = a + (1.0 - a) * ba
                        if not clamped:
                            d_opac[gi] += dl_da * gauss
                            dp = dl_da * a
                            d_mean2d[gi, 0] -= dp * (conic[gi, 0] * dx + conic[gi, 1] * dy)
                            d_mean2d[gi, 1] -= dp * (conic[gi, 1] * dx + conic[gi, 2] * dy)
                            d_conic[gi, 0] -= dp * 0.5 * dx * dx
                            d_conic[gi, 1] -= dp * dx * dy
                            d_conic[gi, 2] -= dp * 0.5 * dy * dy


# --- render / backward --------------------------------------------------------

@dataclass
class _Record:
    camera: Camera
    settings: RenderSettings
    cloud: GaussianCloud
    deformed: Deformed
    has_delta: bool
    qn: np.ndarray
    qnorm: np.ndarray
    R: np.ndarray
    M: np.ndarray
    p: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    z: np.ndarray
    visible: np.ndarray
    offsets: np.ndarray
    ids: np.ndarray
    box: np.ndarray
    out_T: np.ndarray
    out_last: np.ndarray
    n_tiles_x: int


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad.reshape(len(arr), -1).any(axis=1))[0])
        raise FloatingPointError(f"non-finite {name} at Gaussian index {idx}")


def render(cloud: GaussianCloud, camera: Camera, delta: Delta | None = None,
           settings: RenderSettings | None = None) -> Raster:
    """Render ``cloud`` (optionally displaced by ``delta``) from ``camera``."""
    settings = settings or RenderSettings()
    dtype = cloud.dtype if cloud.count else np.float32
    H, W = camera.height, camera.width
    deformed = apply(cloud, delta)
    for name in ("position", "scale", "rotation", "opacity", "color", "ti"):
        _check_finite(name, getattr(deformed, name))

    n = cloud.count
    qnorm = np.linalg.norm(deformed.rotation, axis=1)
    bad = np.flatnonzero(~(qnorm > 0))
    if bad.size:
        raise ValueError(f"zero-norm quaternion at Gaussian index {int(bad[0])}")
    qn = deformed.rotation / qnorm[:, None]
    R = quaternion_to_matrix(qn)
    M = R * deformed.scale[:, None, :]
    cov3d = M @ np.swapaxes(M, -1, -2)
    p, mean2d, J, cov_cam, cov2d = _project_batch(camera, deformed.position, cov3d, settings.cov_floor)
    z = p[:, 2]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    opac = deformed.opacity

    # exact axis-aligned box of the region where alpha >= alpha_min
    with np.errstate(divide="ignore", invalid="ignore"):
        level = 2.0 * np.log(opac.astype(np.float64) / settings.alpha_min)
    visible = (z > settings.z_near) & (level > 0)
    level = np.where(visible, level, 0.0)
    ext_x = np.sqrt(level * cov2d[:, 0, 0]) + 1.0
    ext_y = np.sqrt(level * cov2d[:, 1, 1]) + 1.0
    px0 = np.ceil(mean2d[:, 0] - ext_x)
    px1 = np.floor(mean2d[:, 0] + ext_x)
    py0 = np.ceil(mean2d[:, 1] - ext_y)
    py1 = np.floor(mean2d[:, 1] + ext_y)
    visible &= (px1 >= 0) & (px0 <= W - 1) & (py1 >= 0) & (py0 <= H - 1)
    px0 = np.clip(np.nan_to_num(px0), 0, W - 1).astype(np.int64)
    px1 = np.clip(np.nan_to_num(px1), 0, W - 1).astype(np.int64)
    py0 = np.clip(np.nan_to_num(py0), 0, H - 1).astype(np.int64)
    py1 = np.clip(np.nan_to_num(py1), 0, H - 1).astype(np.int64)

    vis_idx = np.flatnonzero(visible)
    order = vis_idx[np.argsort(z[vis_idx], kind="stable")]
    tile = settings.tile
    n_tiles_x = (W + tile - 1) // tile
    n_tiles = n_tiles_x * ((H + tile - 1) // tile)
    offsets, ids = _bin_tiles(order.astype(np.int64), px0, px1, py0, py1, tile, n_tiles_x, n_tiles)

    out_rgb = np.empty((H, W, 3), dtype)
    out_depth = np.empty((H, W), dtype)
    out_ti = np.empty((H, W), dtype)
    out_alpha = np.empty((H, W), dtype)
    out_T = np.empty((H, W), np.float64)
    out_last = np.empty((H, W), np.int64)
    k_mean2d = np.ascontiguousarray(mean2d, dtype=np.float64) if n else np.zeros((0, 2))
    k_conic = np.ascontiguousarray(conic, dtype=np.float64) if n else np.zeros((0, 3))
    k_opac = np.ascontiguousarray(opac, dtype=np.float64)
    k_color = np.ascontiguousarray(deformed.color, dtype=np.float64).reshape(n, 3)
    k_depth = np.ascontiguousarray(z, dtype=np.float64)
    k_ti = np.ascontiguousarray(deformed.ti, dtype=np.float64)
    bg = np.asarray(settings.background, dtype=np.float64)
    box = np.stack([px0, px1, py0, py1], axis=1) if n else np.zeros((0, 4), np.int64)
    _forward_kernel(H, W, tile, n_tiles_x, offsets, ids, box, k_mean2d, k_conic, k_opac, k_color, k_depth, k_ti,
                    bg, float(settings.ti_background), float(settings.depth_background),
                    float(settings.alpha_max), float(settings.alpha_min), float(settings.min_transmittance),
                    out_rgb, out_depth, out_ti, out_alpha, out_T, out_last)

    record = _Record(camera, settings, cloud, deformed, delta is not None, qn, qnorm, R, M, p, J,
                     cov_cam, conic, mean2d, z, visible, offsets, ids, box, out_T, out_last, n_tiles_x)
    return Raster(out_rgb, out_depth, out_ti, out_alpha, record)


def render_backward(record: _Record, adjoint: Raster) -> CloudGrads:
    """Vector-Jacobian product of :func:`render` for the adjoint raster ``adjoint``."""
    cam, st = record.camera, record.settings
    H, W = cam.height, cam.width
    if (adjoint.rgb.shape != (H, W, 3) or adjoint.depth.shape != (H, W)
            or adjoint.ti.shape != (H, W) or adjoint.alpha.shape != (H, W)):
        raise ValueError(f"adjoint raster shape mismatch: expected {(H, W)} channels")
    if st.alpha_max >= 1.0:
        raise ValueError("backward pass requires alpha_max < 1")
    cloud, dfm = record.cloud, record.deformed
    n = cloud.count
    dtype = cloud.dtype if n else np.float32

    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_z = np.zeros(n)
    d_ti = np.zeros(n)
    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    _backward_kernel(H, W, st.tile, record.n_tiles_x, record.offsets, record.ids, record.box,
                     f64(record.mean2d).reshape(n, 2), f64(record.conic).reshape(n, 3), f64(dfm.opacity),
                     f64(dfm.color).reshape(n, 3), f64(record.z), f64(dfm.ti),
                     np.asarray(st.background, dtype=np.float64), float(st.ti_background),
                     float(st.depth_background), float(st.alpha_max), float(st.alpha_min),
                     record.out_T, record.out_last,
                     f64(adjoint.rgb), f64(adjoint.depth), f64(adjoint.ti), f64(adjoint.alpha),
                     d_mean2d, d_conic, d_opac, d_color, d_z, d_ti)

    # conic -> 2D covariance
    conic = np.zeros((n, 2, 2))
    conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 0], conic[:, 1, 1] = (
        record.conic[:, 0], record.conic[:, 1], record.conic[:, 1], record.conic[:, 2])
    Gm = np.zeros((n, 2, 2))
    Gm[:, 0, 0] = d_conic[:, 0]
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * d_conic[:, 1]
    Gm[:, 1, 1] = d_conic[:, 2]
    d_cov2d = -conic @ Gm @ conic

    J = record.J.astype(np.float64)
    cov_cam = record.cov_cam.astype(np.float64)
    d_cov_cam = np.swapaxes(J, -1, -2) @ d_cov2d @ J
    d_J = 2.0 * d_cov2d @ J @ cov_cam

    p = record.p.astype(np.float64)
    x, y, z = p[:, 0], p[:, 1], np.where(p[:, 2] > 0, p[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    d_p = np.zeros((n, 3))
    d_p[:, 0] = d_mean2d[:, 0] * fx / z - d_J[:, 0, 2] * fx / z ** 2
    d_p[:, 1] = d_mean2d[:, 1] * fy / z - d_J[:, 1, 2] * fy / z ** 2
    d_p[:, 2] = (d_z
                 - d_mean2d[:, 0] * fx * x / z ** 2 - d_mean2d[:, 1] * fy * y / z ** 2
                 - d_J[:, 0, 0] * fx / z ** 2 + d_J[:, 0, 2] * 2 * fx * x / z ** 3
                 - d_J[:, 1, 1] * fy / z ** 2 + d_J[:, 1, 2] * 2 * fy * y / z ** 3)
    d_p[~record.visible] = 0.0
    Wr = cam.rotation
    d_pos = d_p @ Wr
    d_cov3d = Wr.T @ np.where(record.visible[:, None, None], d_cov_cam, 0.0) @ Wr
    M = record.M.astype(np.float64)
    d_M = 2.0 * d_cov3d @ M
    R = record.R.astype(np.float64)
    d_scale = np.einsum("nij,nij->nj", d_M, R)
    d_R = d_M * dfm.scale.astype(np.float64)[:, None, :]
    qn = record.qn.astype(np.float64)
    d_qn = quaternion_to_matrix_vjp(qn, d_R)
    d_rot = (d_qn - qn * np.sum(qn * d_qn, axis=1, keepdims=True)) / record.qnorm.astype(np.float64)[:, None]

    o = dfm.opacity.astype(np.float64)
    ti = dfm.ti.astype(np.float64)
    s_canon = np.exp(cloud.raw_scale.astype(np.float64))
    d_scale_eff = d_scale * dfm.scale_active
    grads = CloudGrads(
        position=d_pos.astype(dtype),
        raw_scale=(d_scale_eff * s_canon).astype(dtype),
        rotation=d_rot.astype(dtype),
        raw_opacity=(d_opac * o * (1 - o)).astype(dtype),
        color=d_color.astype(dtype),
        raw_ti=(d_ti * ti * (1 - ti)).astype(dtype),
    )
    if record.has_delta:
        grads.dx = grads.position.copy()
        grads.dr = grads.rotation.copy()
        grads.ds = d_scale_eff.astype(dtype)
    return grads
