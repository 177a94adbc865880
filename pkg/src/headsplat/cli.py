"""Command-line surface.

Exit codes: 0 success, 2 usage/validation, 3 file parse error, 4 numeric
divergence.  ``AVATAR_THREADS`` sets the default worker count for the
renderer; every subcommand documents its flags under ``--help``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from .bench import run_bench
from .bundle import AvatarBundle, BakeParams, bake_bundle
from .errors import DivergenceError, ParseError
from .figures import save_bench_figure, save_loss_figure
from .geom import Camera
from .metrics import metric_psnr, metric_ssim
from .refine import RefineConfig, refine_avatar
from .render import RenderConfig, read_cimg, write_cimg, write_ppm
from .runtime import AvatarRuntime
from .vq import load_codebook, quantization_error, quantize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_DIVERGED = 4


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("AVATAR_THREADS", "1")))
    except ValueError:
        return 1


def _parse_weights(spec: str | None) -> dict[str, float]:
    if not spec:
        return {}
    text = Path(spec[1:]).read_text() if spec.startswith("@") else spec
    try:
        weights = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"weights: invalid JSON: {exc}") from exc
    if not isinstance(weights, dict):
        raise ValueError("weights must be a JSON object of name -> weight")
    for name, value in weights.items():
        if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
            raise ValueError(f"weight {name!r} must be a number in [0, 1], got {value!r}")
    return {k: float(v) for k, v in weights.items()}


def _runtime_from_args(args) -> AvatarRuntime:
    bundle = AvatarBundle.load(args.bundle)
    config = RenderConfig(threads=args.threads)
    return AvatarRuntime(bundle, step=args.step, face_step=args.face_step, config=config)


def _camera_for(args, runtime: AvatarRuntime) -> Camera:
    if args.camera:
        return Camera.load(args.camera)
    if args.yaw is not None or args.pitch is not None or args.distance is not None:
        return runtime.orbit_view(
            args.yaw or 0.0, args.pitch or 0.0, args.distance or 3.2, args.width, args.height
        )
    return runtime.bundle.camera


def _add_runtime_flags(parser, with_camera=True) -> None:
    parser.add_argument("--bundle", required=True, help="bundle directory or manifest.json")
    parser.add_argument("--step", type=int, default=4, help="UV sampling step outside the face")
    parser.add_argument("--face-step", type=int, default=2, help="UV sampling step inside the face ROI")
    parser.add_argument("--threads", type=int, default=_default_threads(), help="render worker threads")
    if with_camera:
        parser.add_argument("--camera", help="camera JSON file (defaults to the bundle camera)")
        parser.add_argument("--yaw", type=float, default=None, help="orbit yaw in degrees")
        parser.add_argument("--pitch", type=float, default=None, help="orbit pitch in degrees")
        parser.add_argument("--distance", type=float, default=None, help="orbit distance in world units")
        parser.add_argument("--width", type=int, default=256, help="render width for orbit cameras")
        parser.add_argument("--height", type=int, default=256, help="render height for orbit cameras")


def _write_outputs(image: np.ndarray, ppm_path: Path, cimg_path: Path | None) -> None:
    ppm_path.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(ppm_path, image)
    if cimg_path is not None:
        write_cimg(cimg_path, image)


def cmd_bake(args) -> int:
    params = BakeParams(
        resolution=args.resolution,
        face_size=args.face_size,
        subdivision=args.subdivision,
        radius=args.radius,
        neck_length=args.neck_length,
        band_width=args.band_width,
        seed=args.seed,
        render_size=args.render_size,
    )
    bundle = bake_bundle(params)
    manifest = bundle.save(args.out)
    print(f"baked bundle -> {manifest}")
    return EXIT_OK


def cmd_render(args) -> int:
    runtime = _runtime_from_args(args)
    weights = _parse_weights(args.weights)
    camera = _camera_for(args, runtime)
    result = runtime.render_frame(weights, camera)
    out = Path(args.out)
    cimg = Path(args.cimg) if args.cimg else out.with_suffix(".cimg")
    _write_outputs(result.image, out, cimg)
    print(f"rendered {len(result.image[0])}x{len(result.image)} ({result.splat_count} splats) -> {out}")
    return EXIT_OK


def cmd_turntable(args) -> int:
    if args.frames < 1:
        raise ValueError("frames must be >= 1")
    if args.distance <= 0:
        raise ValueError("orbit distance must be positive")
    runtime = _runtime_from_args(args)
    weights = _parse_weights(args.weights)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(args.frames):
        yaw = 360.0 * i / args.frames
        camera = runtime.orbit_view(yaw, args.pitch or 0.0, args.distance, args.width, args.height)
        result = runtime.render_frame(weights, camera)
        _write_outputs(result.image, out_dir / f"frame_{i:04d}.ppm", out_dir / f"frame_{i:04d}.cimg")
    print(f"wrote {args.frames} turntable frames -> {out_dir}")
    return EXIT_OK


def cmd_animate(args) -> int:
    runtime = _runtime_from_args(args)
    camera = _camera_for(args, runtime)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for lineno, line in enumerate(Path(args.track).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.track}: invalid JSON at line {lineno}: {exc}") from exc
        weights = record.get("weights", {})
        for name, value in weights.items():
            if not 0.0 <= float(value) <= 1.0:
                raise ValueError(f"{args.track}:{lineno}: weight {name!r} out of [0, 1]")
        result = runtime.render_frame({k: float(v) for k, v in weights.items()}, camera)
        _write_outputs(result.image, out_dir / f"frame_{count:04d}.ppm", out_dir / f"frame_{count:04d}.cimg")
        count += 1
    print(f"rendered {count} animation frames -> {out_dir}")
    return EXIT_OK


def cmd_bench(args) -> int:
    runtime = _runtime_from_args(args)
    camera = _camera_for(args, runtime)
    report, _ = run_bench(runtime, camera, frames=args.frames, warmup=args.warmup)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save_json(out)
    jsonl = Path(args.jsonl) if args.jsonl else out.with_name(out.stem + "_frames.jsonl")
    report.save_frames_jsonl(jsonl)
    figure = Path(args.figure) if args.figure else out.with_suffix(".png")
    save_bench_figure(report, figure)
    print(f"bench report -> {out} (+ {jsonl.name}, {figure.name})")
    for stage, stats in report.stages.items():
        print(f"  {stage:20s} median {stats['median_us']/1000.0:9.3f} ms  p95 {stats['p95_us']/1000.0:9.3f} ms")
    print(f"  {'total':20s} median {report.total['median_us']/1000.0:9.3f} ms")
    return EXIT_OK


def cmd_refine(args) -> int:
    bundle = AvatarBundle.load(args.bundle)
    if len(args.target) != len(args.camera):
        raise ValueError("--target and --camera must be given the same number of times")
    targets = [(read_cimg(t), Camera.load(c)) for t, c in zip(args.target, args.camera)]
    config = RefineConfig(
        iterations=args.iterations,
        step_size=args.step_size,
        momentum=args.momentum,
        maps=tuple(args.maps.split(",")),
        weights=_parse_weights(args.weights),
        sample_step=args.step,
        face_step=args.face_step,
        render=RenderConfig(threads=args.threads, opacity_floor=0.0),
    )
    result = refine_avatar(bundle, targets, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atlas_mod.save_atlas(out_dir / "static_atlas_refined.uvam", result.static_atlas_raw)
    atlas_mod.save_atlas(out_dir / "dynamic_atlas_refined.uvam", result.dynamic_atlas_raw)
    result.write_trace_csv(out_dir / "loss_trace.csv")
    save_loss_figure(result.trace, out_dir / "loss_trace.png")
    first, last = result.trace[0]["total"], result.trace[-1]["total"]
    print(f"refined {len(result.trace) - 1} iterations: loss {first:.4e} -> {last:.4e} ({out_dir})")
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = read_cimg(args.a), read_cimg(args.b)
    psnr = metric_psnr(a, b)
    ssim = metric_ssim(a, b)
    doc = {"psnr_db": "+inf" if math.isinf(psnr) else round(psnr, 6), "ssim": round(ssim, 6)}
    print(json.dumps(doc))
    return EXIT_OK


def cmd_quantize(args) -> int:
    grid = np.load(args.grid)
    book = load_codebook(args.codebook)
    snapped = quantize(grid, book)
    np.save(args.out, snapped.indices)
    err = quantization_error(grid, book)
    doc = {"mean_squared_error": err, "codebook_entries": book.size, "grid_shape": list(grid.shape)}
    if args.error_out:
        Path(args.error_out).write_text(json.dumps(doc, indent=2) + "\n")
    print(json.dumps(doc))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve

    bundle = AvatarBundle.load(args.bundle)
    host, _, port = args.bind.partition(":")
    serve(bundle, host or "127.0.0.1", int(port or 0), config=RenderConfig(threads=args.threads))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bake", help="generate a synthetic avatar bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=1024)
    p.add_argument("--face-size", type=int, default=400)
    p.add_argument("--subdivision", type=int, default=3)
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--neck-length", type=float, default=0.3)
    p.add_argument("--band-width", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--render-size", type=int, default=512)
    p.set_defaults(func=cmd_bake)

    p = sub.add_parser("render", help="render one frame")
    _add_runtime_flags(p)
    p.add_argument("--weights", help='expression weights, JSON text or @file (e.g. \'{"jaw-open": 1}\')')
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--cimg", help="output CIMG path (defaults next to --out)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("turntable", help="render a Y-axis orbit")
    _add_runtime_flags(p, with_camera=False)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--distance", type=float, default=3.2, help="orbit radius in world units")
    p.add_argument("--pitch", type=float, default=0.0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--weights")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_turntable)

    p = sub.add_parser("animate", help="render a JSONL weight track")
    _add_runtime_flags(p)
    p.add_argument("--track", required=True, help="JSONL file: {t_ms, weights} per line")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("bench", help="benchmark the per-frame pipeline")
    _add_runtime_flags(p)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--out", default="bench_report.json")
    p.add_argument("--jsonl", help="per-frame JSONL path")
    p.add_argument("--figure", help="stage breakdown figure path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("refine", help="person-specific atlas refinement")
    p.add_argument("--bundle", required=True)
    p.add_argument("--target", action="append", required=True, help="target CIMG (repeatable)")
    p.add_argument("--camera", action="append", required=True, help="camera JSON (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--step-size", type=float, default=0.5)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--maps", default="static_color,dynamic_color")
    p.add_argument("--weights", help="expression during refinement")
    p.add_argument("--step", type=int, default=4)
    p.add_argument("--face-step", type=int, default=2)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two CIMG images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("quantize", help="nearest-entry quantization of a feature grid")
    p.add_argument("--grid", required=True, help=".npy feature grid (m, n, d)")
    p.add_argument("--codebook", required=True, help="CBOK codebook file")
    p.add_argument("--out", required=True, help=".npy output for indices")
    p.add_argument("--error-out", help="JSON file for the quantization error")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("serve", help="run the live puppeteering service")
    p.add_argument("--bundle", required=True)
    p.add_argument("--bind", default="127.0.0.1:8790")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
