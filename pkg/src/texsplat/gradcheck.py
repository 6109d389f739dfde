"""Finite-difference oracle for every analytic backward pass.

The oracle only ever calls forward functions. Each check perturbs one scalar
parameter at a time, forms a central difference, and compares it with the
corresponding entry of the analytic gradient.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .deformation import DeformationParams, Delta, deform_backward, deform_with_cache, positional_encoding, \
    positional_encoding_vjp
from .raster import Raster, RenderSettings, render, render_backward
from .scene import Camera, GaussianCloud, logit, look_at
from .texture import sobel_magnitude, sobel_magnitude_vjp

log = logging.getLogger(__name__)

CLOUD_GROUPS = ("position", "raw_scale", "rotation", "raw_opacity", "color", "raw_ti")
DELTA_GROUPS = ("dx", "dr", "ds")


def finite_diff(scalar_fn: Callable[[np.ndarray], float], params: np.ndarray, index, h: float) -> float:
    """Central difference of ``scalar_fn`` along one entry of ``params``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(params, dtype=np.float64, copy=True)
    base = x[index]
    x[index] = base + h
    f_plus = float(scalar_fn(x))
    x[index] = base - h
    f_minus = float(scalar_fn(x))
    if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
        raise FloatingPointError(f"non-finite evaluation at index {index} with h={h}")
    return (f_plus - f_minus) / (2.0 * h)


@dataclass
class CheckReport:
    op: str
    group: str
    max_rel: float = 0.0
    max_abs: float = 0.0
    failing: list = field(default_factory=list)
    h: float = 1e-4
    excluded: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failing

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" excluded={len(self.excluded)}" if self.excluded else ""
        return (f"{status} {self.op}/{self.group}: n={self.checked} max_rel={self.max_rel:.3e} "
                f"max_abs={self.max_abs:.3e} h={self.h:g}{extra}"
                + (f" failing={self.failing[:8]}" if self.failing else ""))


def _close(fd: float, an: float, rtol: float, atol: float) -> bool:
    return abs(fd - an) <= atol + rtol * max(abs(fd), abs(an))


def check_array(op: str, group: str, fn, x: np.ndarray, grad: np.ndarray, h: float = 1e-4,
                rtol: float = 1e-3, atol: float = 1e-6) -> CheckReport:
    """Compare ``grad`` with finite differences of ``fn`` over every entry of ``x``.

    The step is ``h`` times the entry's magnitude (at least ``h``). A mismatch is
    retried at half the step. If that still mismatches and the two differences
    disagree with each other, the entry sits on a non-smooth point (a step
    crossed the alpha cutoff, the sqrt kink, or a depth-order swap) and is
    excluded with a logged note.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValueError(f"{op}/{group}: gradient shape {grad.shape} != parameter shape {x.shape}")
    report = CheckReport(op, group, h=h)
    for idx in np.ndindex(x.shape):
        step = h * max(1.0, abs(float(x[idx])))
        fd = finite_diff(fn, x, idx, step)
        an = float(grad[idx])
        if not _close(fd, an, rtol, atol):
            fd_half = finite_diff(fn, x, idx, step / 2)
            if not _close(fd_half, an, rtol, atol) and not _close(fd, fd_half, rtol, atol):
                log.info("%s/%s %s: non-smooth point (fd=%g, fd/2=%g), excluded", op, group, idx, fd, fd_half)
                report.excluded.append(idx)
                continue
            fd = fd_half
        err = abs(fd - an)
        rel = err / max(abs(fd), abs(an), 1e-300)
        report.checked += 1
        report.max_abs = max(report.max_abs, err)
        if err > atol:
            report.max_rel = max(report.max_rel, rel)
        if not _close(fd, an, rtol, atol):
            report.failing.append(tuple(int(i) for i in idx))
    return report


# --- fixture ------------------------------------------------------------------

@dataclass
class Fixture:
    cloud: GaussianCloud
    delta: Delta
    camera: Camera
    settings: RenderSettings
    adjoint: Raster
    gt: losses.GroundTruth
    loss_config: losses.LossConfig
    deformation: DeformationParams
    positions: np.ndarray
    t: float
    seed: int


def make_fixture(seed: int = 11, count: int = 5, size: int = 16, zero_head: bool = False) -> Fixture:
    """Small random 64-bit scene: ``count`` Gaussians seen by a ``size`` x ``size`` camera."""
    rng = np.random.default_rng(seed)
    cloud = GaussianCloud(
        position=rng.uniform(-0.3, 0.3, (count, 3)),
        raw_scale=np.log(rng.uniform(0.08, 0.2, (count, 3))),
        rotation=rng.normal(size=(count, 4)),
        raw_opacity=logit(rng.uniform(0.3, 0.8, count)),
        color=rng.uniform(0.0, 1.0, (count, 3)),
        raw_ti=rng.normal(size=count),
    )
    c = (size - 1) / 2
    f = 1.25 * size
    camera = Camera(f, f, c, c, size, size, look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0]))
    delta = Delta(rng.normal(scale=0.02, size=(count, 3)), rng.normal(scale=0.05, size=(count, 4)),
                  rng.normal(scale=0.01, size=(count, 3)))
    adjoint = Raster(rng.normal(size=(size, size, 3)), rng.normal(size=(size, size)),
                     rng.normal(size=(size, size)), rng.normal(size=(size, size)))
    gt_rgb = rng.uniform(0.0, 1.0, (size, size, 3))
    gt = losses.GroundTruth(gt_rgb, rng.uniform(0.0, 1.0, (size, size)), rng.uniform(1.0, 3.0, (size, size)))
    params = DeformationParams.init(seed, depth=2, width=8, L_pos=2, L_time=2, dtype=np.float64)
    if not zero_head:
        W, b = params.head
        params.head = (rng.normal(scale=0.3, size=W.shape), rng.normal(scale=0.3, size=b.shape))
    return Fixture(cloud, delta, camera, RenderSettings(), adjoint, gt,
                   losses.LossConfig(lambda1=0.5, lambda2=0.5), params,
                   rng.uniform(-1.0, 1.0, (count, 3)), 0.37, seed)


# --- individual ops ---------------------------------------------------------------

def _inner(a: Raster, b: Raster) -> float:
    return float(sum(np.sum(getattr(a, k) * getattr(b, k)) for k in ("rgb", "depth", "ti", "alpha")))


def _check_render(fx: Fixture, h, rtol, atol, corrupt) -> list[CheckReport]:
    raster = render(fx.cloud, fx.camera, fx.delta, fx.settings)
    grads = render_backward(raster.record, fx.adjoint)
    if corrupt == "render":
        grads.position = -grads.position
    out = []
    for name in CLOUD_GROUPS:
        def fn(x, name=name):
            c = fx.cloud.copy()
            setattr(c, name, x.reshape(getattr(c, name).shape))
            return _inner(render(c, fx.camera, fx.delta, fx.settings), fx.adjoint)
        out.append(check_array("render", name, fn, getattr(fx.cloud, name), getattr(grads, name), h, rtol, atol))
    for name in DELTA_GROUPS:
        def fn(x, name=name):
            d = Delta(fx.delta.dx.copy(), fx.delta.dr.copy(), fx.delta.ds.copy())
            setattr(d, name, x)
            return _inner(render(fx.cloud, fx.camera, d, fx.settings), fx.adjoint)
        out.append(check_array("render", name, fn, getattr(fx.delta, name), getattr(grads, name), h, rtol, atol))
    return out


def _check_losses(fx: Fixture, h, rtol, atol, corrupt) -> list[CheckReport]:
    raster = render(fx.cloud, fx.camera, fx.delta, fx.settings)
    rgb, depth, ti, gt = raster.rgb, raster.depth, raster.ti, fx.gt
    eps = fx.loss_config.pcc_epsilon
    sign = -1.0 if corrupt == "losses" else 1.0
    y = gt.ti
    cases = [
        ("l1", rgb, lambda a: losses.l1_loss(a, gt.rgb), losses.l1_loss_vjp(rgb, gt.rgb)),
        ("ssim", rgb, lambda a: losses.ssim(a, gt.rgb), losses.ssim_vjp(rgb, gt.rgb)),
        ("rgb", rgb, lambda a: losses.rgb_loss(a, gt.rgb), losses.rgb_loss_vjp(rgb, gt.rgb)),
        ("pcc_x", ti, lambda a: losses.pcc(a, y, eps), losses.pcc_vjp(ti, y, eps)[0]),
        ("pcc_y", ti, lambda a: losses.pcc(y, a, eps), losses.pcc_vjp(y, ti, eps)[1]),
        ("sobel", depth, lambda a: float(np.sum(sobel_magnitude(a) * gt.ti)), sobel_magnitude_vjp(depth, gt.ti)),
        ("tex", ti, lambda a: losses.tex_loss(a, gt.ti, eps), losses.tex_loss_vjp(ti, gt.ti, eps)),
        ("tex_l1", ti, lambda a: losses.tex_loss(a, gt.ti, eps, "l1"), losses.tex_loss_vjp(ti, gt.ti, eps, "l1")),
        ("tadr", depth, lambda a: losses.tadr_loss(a, gt.depth_proxy, eps),
         losses.tadr_loss_vjp(depth, gt.depth_proxy, eps)),
    ]
    out = []
    for name, x, fn, g in cases:
        out.append(check_array("losses", name, fn, x, sign * g, h, rtol, atol))

    # total objective, one check per raster channel
    _, adj = losses.total_loss(raster, gt, fx.loss_config)
    for ch in ("rgb", "depth", "ti"):
        def fn(x, ch=ch):
            r = Raster(raster.rgb, raster.depth, raster.ti, raster.alpha)
            setattr(r, ch, x)
            return losses.total_loss(r, gt, fx.loss_config)[0].total
        out.append(check_array("losses", f"total_{ch}", fn, getattr(raster, ch), sign * getattr(adj, ch),
                               h, rtol, atol))
    return out


def _check_encoding(fx: Fixture, h, rtol, atol, corrupt) -> list[CheckReport]:
    rng = np.random.default_rng(fx.seed + 1)
    out = []
    for L, v in ((4, fx.positions), (3, np.array([[fx.t]]))):
        w = rng.normal(size=positional_encoding(v, L).shape)
        g = positional_encoding_vjp(v, L, w)
        if corrupt == "encoding":
            g = -g
        out.append(check_array("encoding", f"L{L}_d{v.shape[-1]}",
                               lambda x, L=L, w=w: float(np.sum(positional_encoding(x, L) * w)), v, g, h, rtol, atol))
    return out


def _check_deformation(fx: Fixture, h, rtol, atol, corrupt) -> list[CheckReport]:
    rng = np.random.default_rng(fx.seed + 2)
    n = len(fx.positions)
    wx, wr, ws = rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(size=(n, 3))
    params = fx.deformation
    delta, cache = deform_with_cache(params, fx.positions, fx.t)
    grads = deform_backward(params, cache, wx, wr, ws)
    if corrupt == "deformation":
        grads = [-g for g in grads]
    arrays = params.arrays()
    out = []
    for i, (a, g) in enumerate(zip(arrays, grads)):
        def fn(x, i=i):
            arrs = [b.copy() for b in arrays]
            arrs[i] = x
            d = deform_with_cache(params.like(arrs), fx.positions, fx.t)[0]
            return float(np.sum(d.dx * wx) + np.sum(d.dr * wr) + np.sum(d.ds * ws))
        layer = "head" if i >= len(arrays) - 2 else f"layer{i // 2}"
        out.append(check_array("deformation", f"{layer}_{'W' if i % 2 == 0 else 'b'}", fn, a, g, h, rtol, atol))
    return out


OPS = {
    "render": _check_render,
    "losses": _check_losses,
    "encoding": _check_encoding,
    "deformation": _check_deformation,
}


def check_all(fixture: Fixture | None = None, rtol: float = 1e-3, atol: float = 1e-6, h: float = 1e-4,
              ops=None, corrupt: str | None = None) -> list[CheckReport]:
    """Run every check on ``fixture``; one report per (op, parameter group).

    ``corrupt`` names an op whose analytic gradient is sign-flipped before the
    comparison. It exists only to show that the oracle detects wrong gradients.
    """
    fixture = fixture or make_fixture()
    reports = []
    for name in ops or OPS:
        if name not in OPS:
            raise ValueError(f"unknown op {name!r}; expected one of {tuple(OPS)}")
        reports += OPS[name](fixture, h, rtol, atol, corrupt)
    return reports


def reports_text(reports: list[CheckReport]) -> str:
    lines = [r.line() for r in reports]
    n_fail = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - n_fail}/{len(reports)} groups passed")
    return "\n".join(lines) + "\n"


def reports_csv(reports: list[CheckReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op", "group", "passed", "checked", "max_rel", "max_abs", "h", "n_failing", "n_excluded"])
    for r in reports:
        w.writerow([r.op, r.group, int(r.passed), r.checked, repr(r.max_rel), repr(r.max_abs), repr(r.h),
                    len(r.failing), len(r.excluded)])
    return buf.getvalue()
