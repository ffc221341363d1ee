"""
Spectral splatting workbench - command-line surface.
Subcommands for scene analysis, rendering, training, the zoom benchmark,
entropy maps and synthetic scene generation.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical failure.
"""

import argparse
import os
import sys
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from spectral_splat.bench.analyze import analyze_scene, spectral_statistics, write_report
from spectral_splat.bench.zoom import DEFAULT_MULTIPLIERS, write_zoom_outputs, zoom_bench
from spectral_splat.core.filters import FilterKind, FilterMode
from spectral_splat.core.scene import CameraView
from spectral_splat.optim.trainer import VARIANTS, train
from spectral_splat.render.plot import colorbar, colorize_entropy
from spectral_splat.render.rasterizer import filtered_spectra, render, render_entropy_map
from spectral_splat.storage.cameras import load_cameras, save_cameras
from spectral_splat.storage.images import load_png, save_png, write_json
from spectral_splat.storage.ply_io import load_ply, save_ply
from spectral_splat.storage.synth import KINDS, TEXTURES, on_axis_gaussian, render_targets, synth_scene
from spectral_splat.utils.config import FilterConfig, WorkbenchConfig, load_config
from spectral_splat.utils.errors import EXIT_OK, DataError, ShapeMismatchError, UsageError, WorkbenchError
from spectral_splat.utils.jsonlog import JsonLineWriter
from spectral_splat.utils.logger import get_logger

logger = get_logger(__name__)

PROG = "spectral-splat"


# ─── Shared setup ───────────────────────────────────────────────────────────

def _resolve_config(args: argparse.Namespace) -> WorkbenchConfig:
    """Config file first, then CLI flags on top."""
    cfg = load_config(args.config)
    train_update, render_update = {}, {}
    if args.seed is not None:
        train_update["seed"] = args.seed
    if args.deterministic:
        train_update["deterministic"] = True
        render_update["threads"] = 1
        torch.set_num_threads(1)
    if args.filter is not None:
        cfg.filter = FilterConfig.model_validate({**cfg.filter.model_dump(exclude_unset=True), "mode": args.filter})
    if getattr(args, "iterations", None) is not None:
        train_update["iterations"] = args.iterations
    if train_update:
        try:
            cfg.train = cfg.train.model_validate({**cfg.train.model_dump(), **train_update})
        except ValidationError as e:
            raise DataError(f"Invalid training options: {e}") from e
    if render_update:
        cfg.render = cfg.render.model_copy(update=render_update)
    return cfg


def _pick_camera(views: Sequence[CameraView], index: int) -> CameraView:
    if not -len(views) <= index < len(views):
        raise ShapeMismatchError(f"Camera index {index} out of range for {len(views)} camera(s)")
    return views[index]


def _load_training_pairs(cameras_path: str) -> List[Tuple[CameraView, np.ndarray]]:
    base = os.path.dirname(os.path.abspath(cameras_path))
    pairs = []
    for cam in load_cameras(cameras_path):
        if not cam.image_path:
            raise ShapeMismatchError(f"Camera {cam.camera_id} has no image_path")
        path = cam.image_path if os.path.isabs(cam.image_path) else os.path.join(base, cam.image_path)
        img = load_png(path)
        if img.shape[:2] != (cam.height, cam.width):
            raise ShapeMismatchError(
                f"Image {path} is {img.shape[1]}×{img.shape[0]}, camera {cam.camera_id} expects {cam.width}×{cam.height}"
            )
        pairs.append((cam, img))
    return pairs


# ─── 1. Analyze ─────────────────────────────────────────────────────────────

def cmd_analyze(args: argparse.Namespace, cfg: WorkbenchConfig) -> int:
    """Per-Gaussian ρ, κ, H of a PLY scene plus a summary."""
    report = analyze_scene(load_ply(args.ply), needle_threshold=cfg.densify.tau_spectral)
    if args.out:
        write_report(report, args.out, args.format)
    else:
        with JsonLineWriter() as writer:
            writer.write(report.as_dict()["summary"])
    return EXIT_OK


# ─── 2. Render ──────────────────────────────────────────────────────────────

def cmd_render(args: argparse.Namespace, cfg: WorkbenchConfig) -> int:
    """One PNG per camera plus a render_stats.json sidecar."""
    scene = load_ply(args.ply)
    views = load_cameras(args.cameras)
    mode = cfg.filter.to_mode()
    os.makedirs(args.out_dir, exist_ok=True)

    stats = []
    for i, view in enumerate(views):
        cam = view.zoomed(args.zoom) if args.zoom != 1.0 else view
        result = render(scene, cam, mode, cfg.render)
        name = f"{cam.camera_id or f'view_{i:03d}'}.png"
        save_png(os.path.join(args.out_dir, name), result.framebuffer)

        proj = result.context.projection
        entry = {
            "camera_id": cam.camera_id,
            "file": name,
            "filter": mode.describe(),
            "visible": len(proj),
            "culled_behind": proj.culled_behind,
            "culled_outside": proj.culled_outside,
            "coverage": float(np.mean(result.framebuffer.alpha)),
        }
        if len(proj):
            summary = spectral_statistics(filtered_spectra(result))
            entry.update(kappa_median=summary.kappa_median, entropy_mean=summary.entropy_mean)
        stats.append(entry)
        logger.info(f"Rendered {name}: {entry['visible']} splats visible")

    write_json(os.path.join(args.out_dir, "render_stats.json"), stats)
    return EXIT_OK


# ─── 3. Train ───────────────────────────────────────────────────────────────

def cmd_train(args: argparse.Namespace, cfg: WorkbenchConfig) -> int:
    """Fit a scene to posed images (camera file or synthetic target) and write the PLY."""
    test_pairs: List[Tuple[CameraView, np.ndarray]] = []
    if args.synth:
        synth = synth_scene(args.synth, args.n, seed=args.synth_seed, texture=args.texture)
        pairs = render_targets(synth.scene, synth.train_views, cfg=cfg.render)
        test_pairs = render_targets(synth.scene, synth.test_views, cfg=cfg.render)
    elif args.cameras:
        pairs = _load_training_pairs(args.cameras)
    else:
        raise UsageError("train needs --cameras or --synth")

    init_scene = load_ply(args.init) if args.init else None
    mode: Optional[FilterMode] = cfg.filter.to_mode() if "mode" in cfg.filter.model_fields_set else None

    with JsonLineWriter(args.log_file) as writer:
        result = train(
            pairs,
            cfg.train,
            cfg.densify,
            mode=mode,
            variant=args.variant,
            render_cfg=cfg.render,
            test_views=test_pairs,
            init_scene=init_scene,
            writer=writer,
        )
        writer.write({"event": "final", **result.metrics})
    save_ply(result.scene, args.out)
    return EXIT_OK


# ─── 4. Zoom bench ──────────────────────────────────────────────────────────

def cmd_zoom_bench(args: argparse.Namespace, cfg: WorkbenchConfig) -> int:
    """κ/H statistics of filtered splats over focal multipliers, with the closed-form curve."""
    if args.ply:
        scene = load_ply(args.ply)
        if not args.cameras:
            raise UsageError("zoom-bench on a PLY needs --cameras")
        view = _pick_camera(load_cameras(args.cameras), args.camera_index)
    else:
        scene, view = on_axis_gaussian(kappa=args.axis_kappa)

    modes = [FilterMode.from_name(name, s0=cfg.filter.s0) for name in args.modes]
    reference = load_ply(args.reference) if args.reference else None
    report = zoom_bench(
        scene, view, modes, args.multipliers, cfg.render,
        reference_scene=reference, strict=not args.no_checks,
    )
    write_zoom_outputs(report, args.out)
    return EXIT_OK


# ─── 5. Entropy map ─────────────────────────────────────────────────────────

def cmd_entropy_map(args: argparse.Namespace, cfg: WorkbenchConfig) -> int:
    """Blue (low H) → green (high H) heat map plus its colorbar."""
    scene = load_ply(args.ply)
    view = _pick_camera(load_cameras(args.cameras), args.camera_index)
    fb = render_entropy_map(scene, view, cfg.filter.to_mode(), cfg.render)
    save_png(args.out, colorize_entropy(fb.rgb[..., 0], fb.alpha > 0.0))
    stem, _ = os.path.splitext(args.out)
    save_png(f"{stem}_colorbar.png", colorbar())
    return EXIT_OK


# ─── 6. Synthetic scenes ────────────────────────────────────────────────────

def cmd_synth(args: argparse.Namespace, cfg: WorkbenchConfig) -> int:
    """Write a synthetic scene, its camera rig and (optionally) target renders."""
    synth = synth_scene(args.kind, args.n, seed=args.synth_seed, texture=args.texture)
    save_ply(synth.scene, args.out)
    stem, _ = os.path.splitext(args.out)
    views = synth.train_views + synth.test_views
    if args.images:
        image_dir = f"{stem}_images"
        pairs = render_targets(synth.scene, views, cfg=cfg.render)
        views = []
        for cam, img in pairs:
            rel = os.path.join(os.path.basename(image_dir), f"{cam.camera_id}.png")
            save_png(os.path.join(os.path.dirname(os.path.abspath(args.out)), rel), img)
            views.append(replace(cam, image_path=rel))
    save_cameras(views, f"{stem}_cameras.json")
    return EXIT_OK


# ─── Argument parsing ───────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--filter", choices=[k.value for k in FilterKind], help="Screen-space filter")
    common.add_argument("--seed", type=int, help="RNG seed (overrides the config file)")
    common.add_argument("--deterministic", action="store_true", help="Single worker thread, bit-identical output")
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--log-file", help="JSON-lines log destination (stdout when omitted)")

    parser = argparse.ArgumentParser(prog=PROG, description="CPU Gaussian-splatting workbench with spectral analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="Per-Gaussian spectral report of a PLY scene")
    p.add_argument("ply")
    p.add_argument("--out", help="Report path (.csv or .json); summary to stdout when omitted")
    p.add_argument("--format", choices=["csv", "json"])
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("render", parents=[common], help="Render a PLY scene from every camera")
    p.add_argument("ply")
    p.add_argument("cameras")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--zoom", type=float, default=1.0, help="Focal multiplier applied to every camera")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", parents=[common], help="Fit Gaussians to posed images")
    p.add_argument("--cameras", help="Camera JSON with image_path entries")
    p.add_argument("--synth", choices=KINDS, help="Train against a synthetic scene's renders instead")
    p.add_argument("--n", type=int, default=200, help="Synthetic scene size")
    p.add_argument("--texture", choices=TEXTURES, default="high-frequency")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--variant", choices=list(VARIANTS), default="spectral")
    p.add_argument("--iterations", type=int)
    p.add_argument("--init", help="Initial PLY scene (random init when omitted)")
    p.add_argument("--out", required=True, help="Output PLY path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("zoom-bench", parents=[common], help="Filtered anisotropy under zoom")
    p.add_argument("--ply", help="Scene to analyse (an on-axis test Gaussian when omitted)")
    p.add_argument("--cameras")
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--axis-kappa", type=float, default=144.0)
    p.add_argument("--modes", nargs="+", default=["ewa", "mip", "view-consistent"],
                   choices=[k.value for k in FilterKind])
    p.add_argument("--multipliers", nargs="+", type=float, default=list(DEFAULT_MULTIPLIERS))
    p.add_argument("--reference", help="Ground-truth PLY for PSNR at every zoom")
    p.add_argument("--no-checks", action="store_true", help="Report only, do not fail on check violations")
    p.add_argument("--out", required=True, help="Output prefix for .csv/.json/_curve.png")
    p.set_defaults(func=cmd_zoom_bench)

    p = sub.add_parser("entropy-map", parents=[common], help="Spectral entropy heat map")
    p.add_argument("ply")
    p.add_argument("cameras")
    p.add_argument("--camera-index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_entropy_map)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic scene and camera rig")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--texture", choices=TEXTURES, default="high-frequency")
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--images", action="store_true", help="Also render target PNGs for every camera")
    p.add_argument("--out", required=True, help="Output PLY path")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except WorkbenchError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
