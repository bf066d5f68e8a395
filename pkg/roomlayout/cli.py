"""
Command line entry point.

    python -m roomlayout reconstruct --scene DIR --out DIR [--runs N] ...
    python -m roomlayout evaluate    --scene DIR --mesh mesh.ply
    python -m roomlayout render      --scene DIR --mesh mesh.ply --out DIR
    python -m roomlayout synth       --preset cuboid --out DIR

Exit codes: 0 ok, 2 usage, 3 invalid input, 4 runtime failure,
5 scene rejected by quality control.
"""

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

from roomlayout.config import ConfigLoader, PipelineConfig, settings
from roomlayout.evaluation import depth_error, rasterize, reprojection_iou, scaled_camera, visible_masks
from roomlayout.exceptions import (
    AnnotationError,
    ConfigError,
    LayoutError,
    MeshFormatError,
    NoValidPixelsError,
    SceneValidationError,
)
from roomlayout.mesh_io import read_ply
from roomlayout.pipeline import ABLATIONS, reconstruct, run_ablation, write_outputs
from roomlayout.scene_io import (
    DEPTH_FORMATS,
    GROUND_TRUTH_FILE,
    SceneBundle,
    load_scene,
    read_json,
    write_depth,
    write_json,
    write_label_png,
    write_scene,
)
from roomlayout.synthetic import PRESETS, export_tracks, generate
from roomlayout.tracking import ElementRegistry
from utils.logger import LayoutLogger, SessionManager

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_RUNTIME = 4
EXIT_REJECTED = 5

_FORMATS_HINT = "File formats are described in roomlayout/FORMATS.md."
_INPUT_ERRORS = (AnnotationError, SceneValidationError, ConfigError, MeshFormatError)


def _size(text: str) -> Tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got '{text}'")
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got '{text}'")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roomlayout",
        description="Room layout reconstruction from annotated video frames.",
        epilog=_FORMATS_HINT,
    )
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    rec = sub.add_parser("reconstruct", help="scene directory -> mesh + report", epilog=_FORMATS_HINT)
    rec.add_argument("--scene", required=True, help="scene bundle directory")
    rec.add_argument("--out", required=True, help="output directory")
    rec.add_argument("--config", help="JSON file shaped like defaults.json")
    rec.add_argument("--runs", type=int, help="independent runs (default: qc.runs)")
    rec.add_argument("--base-seed", type=int, default=settings.ROOMLAYOUT_BASE_SEED)
    rec.add_argument("--jobs", type=int, default=settings.ROOMLAYOUT_JOBS, help="worker processes")
    rec.add_argument("--tracks", help="tracks file to use instead of the bundle's tracks.json")
    rec.add_argument("--oracle", action="store_true", help="use ground-truth motion instead of tracks.json")
    rec.add_argument("--no-track-loss", action="store_true")
    rec.add_argument("--no-edge-loss", action="store_true")
    rec.add_argument("--no-perp-loss", action="store_true")
    rec.add_argument("--no-qc", action="store_true", help="accept the best run whatever its IoU")
    rec.add_argument("--iou-threshold", type=float)
    rec.add_argument("--max-iterations", type=int)
    rec.add_argument("--spacing", type=float, help="sampler target spacing in pixels")
    rec.add_argument("--ablation", nargs="+", choices=sorted(ABLATIONS), help="compare loss variants instead")

    ev = sub.add_parser("evaluate", help="mesh + scene -> metrics", epilog=_FORMATS_HINT)
    ev.add_argument("--scene", required=True)
    ev.add_argument("--mesh", required=True, help="PLY written by reconstruct")
    ev.add_argument("--registry", help="registry.json (default: next to the mesh, else ground truth)")
    ev.add_argument("--size", type=_size, help="evaluation raster WIDTHxHEIGHT")
    ev.add_argument("--out", help="write the metrics JSON here as well")

    ren = sub.add_parser("render", help="mesh + cameras -> label/depth images", epilog=_FORMATS_HINT)
    ren.add_argument("--scene", required=True)
    ren.add_argument("--mesh", required=True)
    ren.add_argument("--out", required=True)
    ren.add_argument("--size", type=_size, help="raster WIDTHxHEIGHT (default: annotation size)")
    ren.add_argument("--depth-format", choices=DEPTH_FORMATS, default="png16")
    ren.add_argument("--all-frames", action="store_true", help="render every camera, not only annotated ones")

    syn = sub.add_parser("synth", help="generate a synthetic scene bundle", epilog=_FORMATS_HINT)
    syn.add_argument("--out", required=True)
    syn.add_argument("--config", help="JSON file shaped like defaults.json")
    syn.add_argument("--preset", choices=PRESETS)
    syn.add_argument("--seed", type=int)
    syn.add_argument("--noise-px", type=float, help="track noise std in pixels")
    syn.add_argument("--jitter-px", type=float, help="annotation jitter amplitude in pixels")
    syn.add_argument("--frames", type=int)
    syn.add_argument("--annotate-every", type=int)
    syn.add_argument("--size", type=_size)
    syn.add_argument("--furniture", type=int)
    syn.add_argument("--dropout", type=float, help="track occlusion dropout probability")
    syn.add_argument("--track-spacing", type=float, default=15.0)
    syn.add_argument("--no-tracks", action="store_true", help="omit tracks.json (oracle motion only)")
    syn.add_argument("--depth-format", choices=DEPTH_FORMATS, default="png16")
    return parser


def _set(overrides: Dict[str, Dict[str, Any]], section: str, key: str, value) -> None:
    if value is not None:
        overrides.setdefault(section, {})[key] = value


def _reconstruct_overrides(args) -> Dict[str, Dict[str, Any]]:
    overrides: Dict[str, Dict[str, Any]] = {}
    if args.no_track_loss:
        _set(overrides, "solver", "use_track_loss", False)
    if args.no_edge_loss:
        _set(overrides, "solver", "use_edge_loss", False)
    if args.no_perp_loss:
        _set(overrides, "solver", "use_perp_loss", False)
    if args.no_qc:
        _set(overrides, "qc", "enforce_threshold", False)
    _set(overrides, "qc", "runs", args.runs)
    _set(overrides, "qc", "iou_threshold", args.iou_threshold)
    _set(overrides, "solver", "max_iterations", args.max_iterations)
    _set(overrides, "sampler", "target_spacing", args.spacing)
    return overrides


def _synth_overrides(args) -> Dict[str, Dict[str, Any]]:
    overrides: Dict[str, Dict[str, Any]] = {}
    _set(overrides, "synthetic", "preset", args.preset)
    _set(overrides, "synthetic", "seed", args.seed)
    _set(overrides, "synthetic", "track_noise_px", args.noise_px)
    _set(overrides, "synthetic", "annotation_jitter_px", args.jitter_px)
    _set(overrides, "synthetic", "frames", args.frames)
    _set(overrides, "synthetic", "annotate_every", args.annotate_every)
    _set(overrides, "synthetic", "furniture", args.furniture)
    _set(overrides, "synthetic", "occlusion_dropout", args.dropout)
    if args.size:
        _set(overrides, "synthetic", "width", args.size[0])
        _set(overrides, "synthetic", "height", args.size[1])
    return overrides


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def _cmd_reconstruct(args, request_id: str) -> int:
    config = ConfigLoader().load(args.config, _reconstruct_overrides(args))
    scene = load_scene(args.scene, request_id)
    if args.tracks:
        scene.tracks_path = args.tracks

    if args.ablation:
        summary = run_ablation(
            scene, args.ablation, config, config.qc.runs, args.base_seed, args.jobs, request_id, args.oracle
        )
        os.makedirs(args.out, exist_ok=True)
        write_json(os.path.join(args.out, "ablation.json"), summary)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK

    result = reconstruct(scene, config, config.qc.runs, args.base_seed, args.jobs, request_id, args.oracle)
    write_outputs(result, args.out)
    status = "accepted" if result.accepted else "rejected"
    print(f"{scene.scene_id}: {status}, IoU {result.decision.best_iou:.4f} (run {result.decision.best_index}, seed {result.best.seed})")
    return EXIT_OK if result.accepted else EXIT_REJECTED


def _registry_for(args, scene: SceneBundle) -> ElementRegistry:
    path = args.registry or os.path.join(os.path.dirname(os.path.abspath(args.mesh)), "registry.json")
    if os.path.exists(path):
        return ElementRegistry.from_records(read_json(path))
    if scene.ground_truth is not None and "registry" in scene.ground_truth:
        return ElementRegistry.from_records(scene.ground_truth["registry"])
    raise SceneValidationError(f"no registry.json next to {args.mesh} and no {GROUND_TRUTH_FILE} in the scene")


def _cmd_evaluate(args, request_id: str) -> int:
    scene = load_scene(args.scene, request_id)
    mesh = read_ply(args.mesh)
    try:
        registry = _registry_for(args, scene)
    except (KeyError, TypeError, ValueError) as e:
        raise SceneValidationError(f"malformed registry: {e}") from e
    report = reprojection_iou(mesh, scene.frames, scene.cameras, registry, args.size)
    metrics = {"scene_id": scene.scene_id, "iou": report.to_dict(), "depth_error": None}
    if scene.depth:
        try:
            metrics["depth_error"] = depth_error(mesh, scene.cameras, scene.depth, visible_masks(scene.frames))
        except NoValidPixelsError as e:
            LayoutLogger().log_warning(request_id, str(e), event_type="depth_error_skipped")
    if args.out:
        write_json(args.out, metrics)
    print(json.dumps({"mean_iou": report.mean_iou, "frame_mean_iou": report.frame_mean_iou,
                      "depth_error": metrics["depth_error"]}, sort_keys=True))
    return EXIT_OK


def _cmd_render(args, request_id: str) -> int:
    scene = load_scene(args.scene, request_id)
    mesh = read_ply(args.mesh)
    image_size = scene.frames[0].image_size
    size = args.size or image_size
    wanted = sorted(scene.cameras) if args.all_frames else scene.annotated_frames
    os.makedirs(args.out, exist_ok=True)
    ext = "png" if args.depth_format == "png16" else "f32"
    for fi in wanted:
        cam = scene.cameras[fi]
        if size != image_size:
            cam = scaled_camera(cam, size[0] / image_size[0], size[1] / image_size[1])
        image = rasterize(mesh, cam, size)
        write_label_png(os.path.join(args.out, f"label_{fi:06d}.png"), image.label)
        write_depth(os.path.join(args.out, f"depth_{fi:06d}.{ext}"), image.depth, args.depth_format)
    LayoutLogger().log_stage(request_id, "render_written", counts={"frames": len(wanted), "width": size[0], "height": size[1]})
    print(f"rendered {len(wanted)} frames to {args.out}")
    return EXIT_OK


def _cmd_synth(args, request_id: str) -> int:
    config = ConfigLoader().load(args.config, _synth_overrides(args))
    bundle, scene = generate(config.synthetic, request_id)
    tracks = None if args.no_tracks else export_tracks(bundle, scene, args.track_spacing)
    write_scene(args.out, bundle, tracks, args.depth_format)
    print(f"wrote {bundle.scene_id} ({len(bundle.frames)} annotated frames, {len(bundle.cameras)} cameras) to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "reconstruct": _cmd_reconstruct,
    "evaluate": _cmd_evaluate,
    "render": _cmd_render,
    "synth": _cmd_synth,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    if args.log_level:
        SessionManager().set_level(args.log_level)
    logger = LayoutLogger()
    request_id = logger.generate_request_id()
    try:
        return _COMMANDS[args.command](args, request_id)
    except _INPUT_ERRORS as e:
        print(f"error: {e}\n{_FORMATS_HINT}", file=sys.stderr)
        return EXIT_INVALID
    except LayoutError as e:
        logger.log_error(request_id, type(e).__name__, str(e))
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
