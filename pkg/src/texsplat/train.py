"""Training loop, evaluation and novel-view rendering."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .deformation import DeformationParams, deform, deform_backward, deform_with_cache
from .io import atomic_write_bytes, read_manifest, read_pfm, read_png, write_pfm, write_png
from .losses import GroundTruth, LossConfig, LossReport, ssim, total_loss
from .raster import RenderSettings, render, render_backward
from .scene import Camera, GaussianCloud, init_cloud, load_checkpoint, save_checkpoint
from .synth import DepthProxyConfig, depth_proxy
from .taco import LearningRates, NoiseConfig, TrainState, prune, taco_step
from .texture import texture_map

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "l1", "ssim", "tex", "tadr", "total", "psnr_probe")
PSNR_CAP = 100.0


class TrainingAborted(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "run"
    iterations: int = 5000
    warmup: int = 500
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    init_count: int = 1000
    init_checkpoint: str = ""
    prune_interval: int = 100
    prune_threshold: float = 0.005
    eval_interval: int = 500
    channel_mode: str = "luminance"
    spatial_scale: float = 0.0          # 0 -> half the scene bounding-box diagonal
    deformation_depth: int = 4
    deformation_width: int = 64
    L_pos: int = 10
    L_time: int = 6
    write_plot: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(c_noise=50.0))
    lr: LearningRates = field(default_factory=LearningRates)
    proxy: DepthProxyConfig = field(default_factory=DepthProxyConfig)
    render: RenderSettings = field(default_factory=RenderSettings)

    def __post_init__(self):
        if self.iterations < 0 or self.warmup < 0:
            raise ValueError("iterations and warmup must be non-negative")
        if self.iterations and self.iterations <= self.warmup:
            log.warning("warm-up (%d) covers the whole run (%d iterations)", self.warmup, self.iterations)

    # flat "section.key" mapping used by config files and CLI overrides
    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v):
                for k, sub in asdict(v).items():
                    out[f"{f.name}.{k}"] = list(sub) if isinstance(sub, tuple) else sub
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        cfg = cls()
        top, nested = {}, {}
        for key, value in flat.items():
            if "." in key:
                section, name = key.split(".", 1)
                nested.setdefault(section, {})[name] = value
            else:
                top[key] = value
        known = {f.name: f for f in fields(cls)}
        for key in list(top) + list(nested):
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
        kwargs = {k: v for k, v in top.items()}
        for section, values in nested.items():
            base = asdict(getattr(cfg, section))
            unknown = set(values) - set(base)
            if unknown:
                raise KeyError(f"unknown config keys in section {section!r}: {sorted(unknown)}")
            base.update(values)
            sub_cls = type(getattr(cfg, section))
            kwargs[section] = sub_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in base.items()})
        return cls(**{**{f.name: getattr(cfg, f.name) for f in fields(cls)}, **kwargs})

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            flat = json.load(f)
        flat.update(overrides or {})
        return cls.from_flat(flat)


@dataclass
class Frame:
    camera: Camera
    gt: GroundTruth
    split: str
    index: int


def load_frames(dataset: str, dtype=np.float32, proxy: DepthProxyConfig | None = None,
                channel_mode: str = "luminance"):
    root = Path(dataset)
    manifest = read_manifest(root / "manifest.json")
    proxy = proxy or DepthProxyConfig()
    frames = []
    for entry in manifest.frames:
        rgb = read_png(root / entry.image).astype(dtype)
        depth = read_pfm(root / entry.depth)
        gt = GroundTruth(rgb=rgb, ti=texture_map(rgb, channel_mode).values.astype(dtype),
                         depth_proxy=depth_proxy(depth, entry.index, proxy).astype(dtype))
        frames.append(Frame(entry.camera, gt, entry.split, entry.index))
    return manifest, frames


@dataclass
class TrainResult:
    cloud: GaussianCloud
    params: DeformationParams
    rows: list
    checkpoint: Path
    metrics: Path


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if not isinstance(v, int) else str(v)


def metrics_csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue().encode("utf-8")


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(f)]


def render_at(cloud: GaussianCloud, params: DeformationParams | None, camera: Camera, t: float | None,
              settings: RenderSettings | None = None):
    """Render in deformed space at ``t``; canonical space when ``t`` is None."""
    delta = deform(params, cloud.position, t) if (params is not None and t is not None) else None
    return render(cloud, camera, delta, settings)


def _diagnose(grads, def_grads) -> str:
    parts = []
    for name, g in (grads.groups().items() if grads is not None else []):
        parts.append(f"{name}: {'finite' if np.all(np.isfinite(g)) else 'NON-FINITE'}")
    for i, g in enumerate(def_grads or []):
        if not np.all(np.isfinite(g)):
            parts.append(f"deformation.{i}: NON-FINITE")
    return ", ".join(parts)


def train(config: TrainConfig) -> TrainResult:
    dtype = np.dtype(config.dtype)
    manifest, frames = load_frames(config.dataset, dtype, config.proxy, config.channel_mode)
    train_frames = [f for f in frames if f.split == "train"]
    eval_frames = [f for f in frames if f.split == "eval"]
    if not train_frames:
        raise EvaluationError("dataset has an empty train split")
    probe = eval_frames[0] if eval_frames else train_frames[0]

    if config.init_checkpoint:
        cloud, params = load_checkpoint(config.init_checkpoint)
        cloud = cloud.astype(dtype)
        params = params.astype(dtype) if params is not None else None
    else:
        cloud = init_cloud(config.init_count, manifest.bbox_min, manifest.bbox_max, config.seed, dtype)
        params = None
    if params is None:
        params = DeformationParams.init(config.seed + 1, config.deformation_depth, config.deformation_width,
                                        config.L_pos, config.L_time, dtype)

    scale = config.spatial_scale or 0.5 * float(np.linalg.norm(np.subtract(manifest.bbox_max, manifest.bbox_min)))
    lr = LearningRates(**{**asdict(config.lr),
                          "position_init": config.lr.position_init * scale,
                          "position_final": config.lr.position_final * scale})
    state = TrainState(lr=lr, seed=config.seed + 2)
    frame_rng = np.random.default_rng(config.seed + 3)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for it in range(config.iterations):
        frame = train_frames[int(frame_rng.integers(len(train_frames)))]
        use_def = it >= config.warmup
        delta = cache = None
        if use_def:
            delta, cache = deform_with_cache(params, cloud.position, frame.camera.t)
        raster = render(cloud, frame.camera, delta, config.render)
        report, adjoint = total_loss(raster, frame.gt, config.loss)
        grads = render_backward(raster.record, adjoint)
        def_grads = deform_backward(params, cache, grads.dx, grads.dr, grads.ds) if use_def else None
        if not math.isfinite(report.total):
            raise TrainingAborted(f"non-finite loss at iteration {it}; {_diagnose(grads, def_grads)}")
        try:
            taco_step(cloud, grads, params, def_grads, state, config.noise)
        except FloatingPointError as exc:
            raise TrainingAborted(f"iteration {it}: {exc}; {_diagnose(grads, def_grads)}") from exc
        if config.prune_interval and (it + 1) % config.prune_interval == 0:
            cloud, keep = prune(cloud, config.prune_threshold)
            state.compact(keep)
        row = {"iter": it, "l1": report.l1, "ssim": report.ssim, "tex": report.tex,
               "tadr": report.tadr, "total": report.total, "psnr_probe": None}
        if config.eval_interval and ((it + 1) % config.eval_interval == 0 or it + 1 == config.iterations):
            t = probe.camera.t if it + 1 >= config.warmup else None
            row["psnr_probe"] = psnr(render_at(cloud, params, probe.camera, t, config.render).rgb, probe.gt.rgb)
            log.info("iter %d total %.5f probe psnr %.2f dB (%d Gaussians)",
                     it + 1, report.total, row["psnr_probe"], cloud.count)
        rows.append(row)

    ckpt = out / "checkpoint.bin"
    save_checkpoint(cloud, params, ckpt, {"scene_id": manifest.scene_id})
    metrics = out / "metrics.csv"
    atomic_write_bytes(metrics, metrics_csv_bytes(rows))
    atomic_write_bytes(out / "config.json", (json.dumps(config.to_flat(), indent=1, sort_keys=True) + "\n").encode())
    if config.write_plot and rows:
        from .plots import plot_curves
        plot_curves([metrics], ["total", "l1", "tex", "tadr"], out / "loss_curve.png", log_y=True)
    return TrainResult(cloud, params, rows, ckpt, metrics)


@dataclass
class EvalResult:
    rows: list          # (frame index, psnr, ssim)
    mean_psnr: float
    mean_ssim: float

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "psnr", "ssim"])
        for idx, p, s in self.rows:
            w.writerow([idx, repr(p), repr(s)])
        w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])
        return buf.getvalue().encode("utf-8")


def evaluate(checkpoint, dataset: str, split: str = "eval", out_csv=None,
             settings: RenderSettings | None = None) -> EvalResult:
    """Render every frame of ``split`` at its camera and timestamp and tabulate PSNR/SSIM."""
    if isinstance(checkpoint, (str, Path)):
        cloud, params, meta = load_checkpoint(checkpoint, with_metadata=True)
    else:
        cloud, params = checkpoint
        meta = None
    root = Path(dataset)
    manifest = read_manifest(root / "manifest.json")
    if meta and meta.get("scene_id") and manifest.scene_id and meta["scene_id"] != manifest.scene_id:
        raise EvaluationError(f"checkpoint/dataset mismatch: checkpoint scene {meta['scene_id']} "
                              f"vs dataset scene {manifest.scene_id}")
    entries = manifest.split(split)
    if not entries:
        raise EvaluationError(f"empty split {split!r}")
    rows = []
    for e in entries:
        gt = read_png(root / e.image)
        rendered = render_at(cloud, params, e.camera, e.camera.t, settings).rgb.astype(np.float64)
        rows.append((e.index, psnr(rendered, gt), ssim(rendered, gt)))
    result = EvalResult(rows, float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows])))
    if out_csv is not None:
        atomic_write_bytes(out_csv, result.to_csv())
    return result


def render_novel(checkpoint, camera: Camera, t: float | None, out_path, depth_path=None, ti_path=None,
                 settings: RenderSettings | None = None):
    """Render one frame to PNG (plus optional depth / texture-intensity PFMs)."""
    if t is not None and not 0.0 <= t <= 1.0:
        raise ValueError(f"timestamp t={t} outside [0, 1]")
    if isinstance(checkpoint, (str, Path)):
        cloud, params = load_checkpoint(checkpoint)
    else:
        cloud, params = checkpoint
    raster = render_at(cloud, params, camera, t, settings)
    write_png(out_path, raster.rgb)
    if depth_path:
        write_pfm(depth_path, raster.depth)
    if ti_path:
        write_pfm(ti_path, raster.ti)
    return raster
