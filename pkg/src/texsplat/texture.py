"""Sobel texture-intensity maps of images and depth rasters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0],
                    [0.0, 0.0, 0.0],
                    [1.0, 2.0, 1.0]])
LUMA = np.array([0.299, 0.587, 0.114])

CHANNEL_MODES = ("luminance", "mean", "max")


@dataclass
class TextureMap:
    values: np.ndarray
    source_kind: str  # "rgb" or "depth"


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    return rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]


def _correlate3(padded: np.ndarray, kernel: np.ndarray, H: int, W: int) -> np.ndarray:
    # row-major stencil order, starting from zero, per output pixel
    acc = np.zeros((H, W), dtype=padded.dtype)
    for a in range(3):
        for b in range(3):
            acc = acc + kernel[a, b] * padded[a:a + H, b:b + W]
    return acc


def sobel_xy(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise ValueError(f"Sobel needs a 2D image of at least 3x3, got shape {gray.shape}")
    if gray.dtype.kind != "f":
        gray = gray.astype(np.float64)
    H, W = gray.shape
    padded = np.pad(gray, 1, mode="edge")
    kx = SOBEL_X.astype(gray.dtype)
    # SOBEL_Y is SOBEL_X transposed; accumulating it column by column makes
    # every stencil row (gx) and column (gy) cancel exactly on constant input
    gx = _correlate3(padded, kx, H, W)
    gy = _correlate3(np.ascontiguousarray(padded.T), kx, W, H).T
    return gx, np.ascontiguousarray(gy)


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    gx, gy = sobel_xy(gray)
    return np.sqrt(gx * gx + gy * gy)


def sobel_magnitude_vjp(gray: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad * sobel_magnitude(gray))`` with respect to ``gray``.

    At zero-magnitude pixels the (one-sided) derivative is taken as zero.
    """
    gx, gy = sobel_xy(gray)
    mag = np.sqrt(gx * gx + gy * gy)
    safe = np.where(mag > 0, mag, 1)
    wx = np.where(mag > 0, grad * gx / safe, 0)
    wy = np.where(mag > 0, grad * gy / safe, 0)
    H, W = gray.shape
    d_pad = np.zeros((H + 2, W + 2), dtype=np.result_type(gray, grad))
    for a in range(3):
        for b in range(3):
            k = SOBEL_X[a, b] * wx + SOBEL_Y[a, b] * wy
            d_pad[a:a + H, b:b + W] += k
    # fold the replicated border back onto the edge pixels
    d_pad[1, :] += d_pad[0, :]
    d_pad[-2, :] += d_pad[-1, :]
    d_pad[:, 1] += d_pad[:, 0]
    d_pad[:, -2] += d_pad[:, -1]
    return d_pad[1:-1, 1:-1]


def sobel_ti(gray: np.ndarray) -> TextureMap:
    return TextureMap(sobel_magnitude(gray), "rgb")


def texture_map(rgb: np.ndarray, channel_mode: str = "luminance") -> TextureMap:
    """Texture intensity of a color image.

    ``luminance`` reduces to gray first; ``mean``/``max`` take per-channel
    Sobel magnitudes and combine them.
    """
    rgb = np.asarray(rgb)
    if channel_mode == "luminance":
        return TextureMap(sobel_magnitude(luminance(rgb)), "rgb")
    if channel_mode not in CHANNEL_MODES:
        raise ValueError(f"unknown channel mode {channel_mode!r}; expected one of {CHANNEL_MODES}")
    per = np.stack([sobel_magnitude(rgb[..., c]) for c in range(rgb.shape[-1])])
    return TextureMap(per.mean(axis=0) if channel_mode == "mean" else per.max(axis=0), "rgb")


def ti_of_depth(depth: np.ndarray) -> TextureMap:
    return TextureMap(sobel_magnitude(depth), "depth")
