"""Command-line entry point: synth, train, eval, render, gradcheck, plot.

Exit codes: 0 success, 1 a check or comparison failed, 2 usage error,
3 aborted run or invalid input (the diagnostic goes to stderr).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def cmd_synth(args) -> int:
    from .synth import SceneSpec, synthesize

    spec = SceneSpec(seed=args.seed, gaussian_count=args.gaussians, pattern=args.pattern,
                     n_train=args.n_train, n_eval=args.n_eval, width=args.size, height=args.size)
    if args.static:
        spec.translation_amplitude = (0.0, 0.0, 0.0)
        spec.rotation_amplitude = 0.0
    manifest = synthesize(spec, args.out)
    print(f"wrote {len(manifest.frames)} frames to {args.out} (scene {manifest.scene_id})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    flat = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            flat = json.load(f)
    for key in ("dataset", "out_dir", "iterations", "seed", "warmup"):
        value = getattr(args, key)
        if value is not None:
            flat[key] = value
    flat.update(_overrides(args.set))
    config = TrainConfig.from_flat(flat)
    if not config.dataset:
        raise ValueError("no dataset given (use --dataset or a config file)")
    result = train(config)
    final = next((r["psnr_probe"] for r in reversed(result.rows) if r["psnr_probe"] is not None), None)
    print(f"checkpoint {result.checkpoint}; metrics {result.metrics}"
          + (f"; final probe PSNR {final:.2f} dB" if final is not None else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    result = evaluate(args.checkpoint, args.dataset, args.split, args.csv)
    for idx, p, s in result.rows:
        print(f"frame {idx:3d}  psnr {p:7.3f}  ssim {s:.4f}")
    print(f"mean       psnr {result.mean_psnr:7.3f}  ssim {result.mean_ssim:.4f}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .io import read_manifest
    from .scene import Camera
    from .train import render_novel

    if args.camera:
        with open(args.camera, encoding="utf-8") as f:
            camera = Camera.from_dict(json.load(f))
    else:
        manifest = read_manifest(Path(args.dataset) / "manifest.json")
        match = [e for e in manifest.frames if e.index == args.frame]
        if not match:
            raise ValueError(f"frame {args.frame} not in {args.dataset}")
        camera = match[0].camera
    render_novel(args.checkpoint, camera, args.t, args.out, args.depth, args.ti)
    print(f"wrote {args.out}" + (" (canonical space)" if args.t is None else f" at t={args.t}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_all, make_fixture, reports_csv, reports_text

    reports = check_all(make_fixture(args.seed), rtol=args.rtol, atol=args.atol, h=args.h, ops=args.ops)
    text = reports_text(reports)
    sys.stdout.write(text)
    if args.csv:
        from .io import atomic_write_bytes
        atomic_write_bytes(args.csv, reports_csv(reports).encode("utf-8"))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


def cmd_plot(args) -> int:
    from .plots import plot_curves, side_by_side

    if args.images:
        side_by_side(args.images, args.out, captions=args.labels, padding=args.padding)
    elif args.csv:
        plot_curves(args.csv, args.columns, args.out, labels=args.labels, log_y=args.log_y, title=args.title)
    else:
        raise ValueError("plot needs --csv files or --images")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="texsplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dynamic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=2024)
    s.add_argument("--gaussians", type=int, default=1000)
    s.add_argument("--pattern", default="checker", choices=("checker", "stripes", "speckle"))
    s.add_argument("--n-train", type=int, default=10)
    s.add_argument("--n-eval", type=int, default=4)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--static", action="store_true", help="no motion (self-consistency scene)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a dataset")
    t.add_argument("--config", help="JSON file of flat config keys")
    t.add_argument("--dataset")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--iterations", type=int)
    t.add_argument("--warmup", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. noise.c_noise=0 (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-frame PSNR/SSIM of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a checkpoint from a dataset or JSON camera")
    r.add_argument("--checkpoint", required=True)
    cam = r.add_mutually_exclusive_group(required=True)
    cam.add_argument("--camera", help="JSON camera (fx, fy, cx, cy, width, height, pose, time)")
    cam.add_argument("--dataset", help="take the camera of --frame from this dataset")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--t", type=float, default=None, help="timestamp in [0, 1]; omit for canonical space")
    r.add_argument("--out", required=True)
    r.add_argument("--depth", help="also write the depth channel as PFM")
    r.add_argument("--ti", help="also write the texture-intensity channel as PFM")
    r.set_defaults(func=cmd_render)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--seed", type=int, default=11)
    g.add_argument("--rtol", type=float, default=1e-3)
    g.add_argument("--atol", type=float, default=1e-6)
    g.add_argument("--h", type=float, default=1e-4)
    g.add_argument("--ops", nargs="+", choices=("render", "losses", "encoding", "deformation"))
    g.add_argument("--csv")
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="loss curves from metrics CSVs, or an image comparison strip")
    pl.add_argument("--csv", nargs="+")
    pl.add_argument("--columns", nargs="+", default=["total"])
    pl.add_argument("--images", nargs="+")
    pl.add_argument("--labels", nargs="+")
    pl.add_argument("--padding", type=int, default=0)
    pl.add_argument("--log-y", action="store_true")
    pl.add_argument("--title")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"texsplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
