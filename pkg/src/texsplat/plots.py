"""Loss-curve and comparison figures written to PNG files."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw, ImageFont  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

# no timestamps or version strings, so identical inputs give identical bytes
_PNG_METADATA = {"Software": None}


class PlotError(ValueError):
    pass


@dataclass
class CurveSeries:
    label: str
    iterations: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.iterations) <= 0):
            raise PlotError(f"series {self.label!r}: iterations must be strictly increasing")


def load_series(path, column: str, label: str | None = None) -> CurveSeries:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if not reader.fieldnames or "iter" not in reader.fieldnames:
                raise PlotError(f"malformed CSV {path}: missing 'iter' header")
            if column not in reader.fieldnames:
                raise PlotError(f"column not found: {column!r} in {path}")
            its, vals = [], []
            for lineno, row in enumerate(reader, start=2):
                if row.get(column) in ("", None):
                    continue
                try:
                    its.append(float(row["iter"]))
                    vals.append(float(row[column]))
                except ValueError as exc:
                    raise PlotError(f"malformed CSV {path}, line {lineno}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise PlotError(f"malformed CSV {path}: {exc}") from exc
    return CurveSeries(label or f"{path.parent.name}/{path.stem}:{column}", np.array(its), np.array(vals))


def load_curves(csv_paths, columns, labels=None) -> list[CurveSeries]:
    """One series per (file, column) pair."""
    csv_paths = [Path(p) for p in csv_paths]
    if not csv_paths:
        raise PlotError("no CSV files given")
    if labels is not None and len(labels) != len(csv_paths):
        raise PlotError(f"{len(labels)} labels for {len(csv_paths)} CSV files")
    series = []
    for i, p in enumerate(csv_paths):
        for c in columns:
            label = None
            if labels is not None:
                label = labels[i] if len(columns) == 1 else f"{labels[i]}:{c}"
            elif len(csv_paths) == 1:
                label = c
            series.append(load_series(p, c, label))
    return series


def plot_curves(csv_paths, columns, out_png, labels=None, log_y: bool = False, title: str | None = None) -> Path:
    """One line per (file, column) pair."""
    series = load_curves(csv_paths, columns, labels)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for s in series:
        style = "o-" if len(s.iterations) < 30 else "-"
        ax.plot(s.iterations, s.values, style, lw=1.2, ms=3, label=s.label)
    ax.set_xlabel("iteration")
    ax.set_ylabel(columns[0] if len(columns) == 1 else "value")
    if log_y and all(np.all(s.values > 0) for s in series if len(s.values)):
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    atomic_write_bytes(out_png, buf.getvalue())
    return Path(out_png)


def side_by_side(image_paths, out_png, captions=None, padding: int = 0, caption_height: int = 12,
                 height: int | None = None) -> Path:
    """Concatenate images horizontally and add a caption strip under each panel."""
    image_paths = [Path(p) for p in image_paths]
    if not image_paths:
        raise PlotError("side_by_side needs at least one image")
    images = []
    for p in image_paths:
        with Image.open(p) as im:
            images.append(im.convert("RGB"))
    target_h = height or images[0].height
    images = [im if im.height == target_h else
              im.resize((max(1, round(im.width * target_h / im.height)), target_h), Image.NEAREST)
              for im in images]
    captions = captions or [p.stem for p in image_paths]
    width = sum(im.width for im in images) + padding * (len(images) - 1)
    canvas = Image.new("RGB", (width, target_h + caption_height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    x = 0
    for im, cap in zip(images, captions):
        canvas.paste(im, (x, 0))
        if caption_height:
            draw.text((x + 2, target_h), str(cap), fill=(0, 0, 0), font=font)
        x += im.width + padding
    buf = io.BytesIO()
    canvas.save(buf, format="PNG")
    atomic_write_bytes(out_png, buf.getvalue())
    return Path(out_png)
