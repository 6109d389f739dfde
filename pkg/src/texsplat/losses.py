"""Photometric, texture and depth-texture losses with exact backward passes.

Every ``*_vjp`` function returns the gradient of the matching loss with
respect to its rendered argument (ground truth is treated as constant).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .raster import Raster
from .texture import sobel_magnitude, sobel_magnitude_vjp

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
TEX_MODES = ("pcc", "l1")


@dataclass
class LossConfig:
    lambda_ssim: float = 0.2
    lambda1: float = 0.01
    lambda2: float = 0.01
    pcc_epsilon: float = 1e-8
    tex_mode: str = "pcc"

    def __post_init__(self):
        if min(self.lambda_ssim, self.lambda1, self.lambda2) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.pcc_epsilon > 0:
            raise ValueError("pcc_epsilon must be positive")
        if self.tex_mode not in TEX_MODES:
            raise ValueError(f"tex_mode must be one of {TEX_MODES}")


@dataclass
class LossReport:
    total: float
    rgb: float
    l1: float
    ssim: float
    tex: float
    tadr: float


@dataclass
class GroundTruth:
    """Supervision for one frame: image, its texture map, and the depth proxy."""

    rgb: np.ndarray
    ti: np.ndarray
    depth_proxy: np.ndarray

    def __post_init__(self):
        self.depth_ti = sobel_magnitude(self.depth_proxy)


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


# --- Pearson correlation ------------------------------------------------------

def _moments(x, y, eps):
    x = np.ravel(x)
    y = np.ravel(y)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pcc needs at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    cov = np.mean(dx * dy)
    vx = float(np.mean(dx * dx))
    vy = float(np.mean(dy * dy))
    # a floor rather than an additive term keeps pcc(x, a*x + b) == 1 to rounding
    return dx, dy, float(cov), math.sqrt(max(vx, eps)), math.sqrt(max(vy, eps)), vx > eps, vy > eps


def pcc(x, y, eps: float = 1e-8) -> float:
    """Population Pearson correlation with both variances floored at ``eps``."""
    _, _, cov, sx, sy, _, _ = _moments(x, y, eps)
    return cov / (sx * sy)


def pcc_vjp(x, y, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    dx, dy, cov, sx, sy, free_x, free_y = _moments(x, y, eps)
    n = dx.size
    p = cov / (sx * sy)
    gx = dy / (n * sx * sy) - (p * dx / (n * sx * sx) if free_x else 0.0)
    gy = dx / (n * sx * sy) - (p * dy / (n * sy * sy) if free_y else 0.0)
    return np.broadcast_to(gx, dx.shape).reshape(np.shape(x)), np.broadcast_to(gy, dy.shape).reshape(np.shape(y))


# --- photometric ----------------------------------------------------------------

def l1_loss(a, b) -> float:
    _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss_vjp(a, b) -> np.ndarray:
    return np.sign(a - b) / a.size


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = gaussian_window()


@lru_cache(maxsize=16)
def _band(n: int, dtype) -> np.ndarray:
    # zero-padded "same" filtering as a matrix; symmetric because the window is
    r = len(_WINDOW) // 2
    i = np.arange(n)
    off = i[None, :] - i[:, None]
    return np.where(np.abs(off) <= r, _WINDOW[np.clip(off + r, 0, 2 * r)], 0.0).astype(dtype)


def _blur(stack):
    # stack is (k, H, W[, C]); filters over H and W and is its own adjoint
    out = stack
    for axis in (1, 2):
        moved = np.moveaxis(out, axis, 0)
        flat = _band(moved.shape[0], out.dtype) @ moved.reshape(moved.shape[0], -1)
        out = np.moveaxis(flat.reshape(moved.shape), 0, axis)
    return out


def _ssim_terms(a, b):
    mu_a, mu_b, saa, sbb, sab = _blur(np.stack([a, b, a * a, b * b, a * b]))
    var_a = saa - mu_a * mu_a
    var_b = sbb - mu_b * mu_b
    cov = sab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim(a, b) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on [0, 1] images."""
    _same_shape(a, b)
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b)
    return float(np.mean((A1 * A2) / (B1 * B2)))


def ssim_and_vjp(a, b) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to ``a``."""
    _same_shape(a, b)
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b)
    denom = B1 * B2
    S = (A1 * A2) / denom
    g = 1.0 / S.size
    d_mu = g * ((2 * mu_b * A2 - 2 * mu_b * A1) / denom - S * (2 * mu_a / B1 - 2 * mu_a / B2))
    d_saa = g * (-S / B2)
    d_sab = g * (2 * A1 / denom)
    b_mu, b_saa, b_sab = _blur(np.stack([d_mu, d_saa, d_sab]))
    return float(np.mean(S)), b_mu + 2 * a * b_saa + b * b_sab


def ssim_vjp(a, b) -> np.ndarray:
    return ssim_and_vjp(a, b)[1]


def rgb_loss(rendered, gt, lambda_ssim: float = 0.2) -> float:
    return (1 - lambda_ssim) * l1_loss(rendered, gt) + lambda_ssim * (1 - ssim(rendered, gt))


def rgb_loss_vjp(rendered, gt, lambda_ssim: float = 0.2) -> np.ndarray:
    return (1 - lambda_ssim) * l1_loss_vjp(rendered, gt) - lambda_ssim * ssim_vjp(rendered, gt)


# --- texture alignment ----------------------------------------------------------

def _align(target, rendered, eps, mode):
    if mode == "pcc":
        return 1.0 - pcc(target, rendered, eps)
    return l1_loss(rendered, target)


def _align_vjp(target, rendered, eps, mode):
    if mode == "pcc":
        return -pcc_vjp(target, rendered, eps)[1]
    return l1_loss_vjp(rendered, target)


def tex_loss(ti_render, ti_gt, eps: float = 1e-8, mode: str = "pcc") -> float:
    _same_shape(ti_render, ti_gt)
    return _align(ti_gt, ti_render, eps, mode)


def tex_loss_vjp(ti_render, ti_gt, eps: float = 1e-8, mode: str = "pcc") -> np.ndarray:
    _same_shape(ti_render, ti_gt)
    return _align_vjp(ti_gt, ti_render, eps, mode)


def tadr_loss(depth_render, depth_proxy, eps: float = 1e-8, mode: str = "pcc",
              proxy_ti: np.ndarray | None = None) -> float:
    _same_shape(depth_render, depth_proxy)
    target = sobel_magnitude(depth_proxy) if proxy_ti is None else proxy_ti
    return _align(target, sobel_magnitude(depth_render), eps, mode)


def tadr_loss_vjp(depth_render, depth_proxy, eps: float = 1e-8, mode: str = "pcc",
                  proxy_ti: np.ndarray | None = None) -> np.ndarray:
    _same_shape(depth_render, depth_proxy)
    target = sobel_magnitude(depth_proxy) if proxy_ti is None else proxy_ti
    g = _align_vjp(target, sobel_magnitude(depth_render), eps, mode)
    return sobel_magnitude_vjp(depth_render, g)


# --- total objective ------------------------------------------------------------

def total_loss(raster: Raster, gt: GroundTruth, config: LossConfig) -> tuple[LossReport, Raster]:
    """Evaluate the weighted objective and the adjoint raster feeding render_backward."""
    eps, mode = config.pcc_epsilon, config.tex_mode
    l1 = l1_loss(raster.rgb, gt.rgb)
    s, d_ssim = ssim_and_vjp(raster.rgb, gt.rgb)
    rgb = (1 - config.lambda_ssim) * l1 + config.lambda_ssim * (1 - s)
    tex = tex_loss(raster.ti, gt.ti, eps, mode)
    tadr = tadr_loss(raster.depth, gt.depth_proxy, eps, mode, gt.depth_ti)
    total = rgb + config.lambda1 * tex + config.lambda2 * tadr
    report = LossReport(total=total, rgb=rgb, l1=l1, ssim=s, tex=tex, tadr=tadr)

    dtype = raster.rgb.dtype
    d_rgb = (1 - config.lambda_ssim) * l1_loss_vjp(raster.rgb, gt.rgb) - config.lambda_ssim * d_ssim
    d_ti = np.zeros_like(raster.ti)
    d_depth = np.zeros_like(raster.depth)
    if config.lambda1:
        d_ti = config.lambda1 * tex_loss_vjp(raster.ti, gt.ti, eps, mode)
    if config.lambda2:
        d_depth = config.lambda2 * tadr_loss_vjp(raster.depth, gt.depth_proxy, eps, mode, gt.depth_ti)
    adjoint = Raster(d_rgb.astype(dtype), d_depth.astype(dtype), d_ti.astype(dtype),
                     np.zeros_like(raster.alpha))
    return report, adjoint
