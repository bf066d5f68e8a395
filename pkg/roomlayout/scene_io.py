"""
Scene I/O - Scene bundle directories and their file formats.

A bundle directory holds:
    cameras.json        per-frame intrinsics and world->camera pose
    annotations.json    per annotated frame element polygons
    tracks.json         optional precomputed point tracks
    ground_truth.json   optional, written by the synthetic generator
    depth/              optional ground-truth depth maps + depth.json manifest

See FORMATS.md for field-level details.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from pydantic import BaseModel, Field, ValidationError

from roomlayout.annotations import (
    FrameAnnotation,
    annotations_to_records,
    load_annotations,
)
from roomlayout.exceptions import AnnotationError, SceneValidationError
from roomlayout.geometry import CameraFrame
from utils.logger import LayoutLogger

CAMERAS_FILE = "cameras.json"
ANNOTATIONS_FILE = "annotations.json"
TRACKS_FILE = "tracks.json"
GROUND_TRUTH_FILE = "ground_truth.json"
DEPTH_DIR = "depth"
DEPTH_MANIFEST = "depth.json"
DEPTH_FORMATS = ("png16", "f32")


@dataclass(eq=False)
class SceneBundle:
    scene_id: str
    cameras: Dict[int, CameraFrame]
    frames: List[FrameAnnotation]
    tracks_path: Optional[str] = None
    depth: Dict[int, np.ndarray] = field(default_factory=dict)
    ground_truth: Optional[Dict[str, Any]] = None
    # In-memory synthetic scene for exact tracks; never serialised.
    oracle: Any = None

    @property
    def annotated_frames(self) -> List[int]:
        return [f.frame_index for f in self.frames]


# ----------------------------------------------------------------------------
# Cameras
# ----------------------------------------------------------------------------

class _CameraRecord(BaseModel):
    frame_index: int
    K: List[float] = Field(min_length=9, max_length=9)
    R: List[float] = Field(min_length=9, max_length=9)
    t: List[float] = Field(min_length=3, max_length=3)
    annotated: bool = False


def parse_cameras(data) -> Dict[int, CameraFrame]:
    if not isinstance(data, list):
        raise SceneValidationError("cameras file must hold an array of camera records")
    try:
        records = [_CameraRecord.model_validate(item) for item in data]
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise SceneValidationError(f"malformed camera record at '{where}': {first['msg']}") from e

    cameras: Dict[int, CameraFrame] = {}
    for rec in records:
        if rec.frame_index in cameras:
            raise SceneValidationError(f"duplicate camera for frame {rec.frame_index}")
        try:
            cameras[rec.frame_index] = CameraFrame(
                frame_index=rec.frame_index,
                intrinsics=np.reshape(rec.K, (3, 3)),
                rotation=np.reshape(rec.R, (3, 3)),
                translation=np.asarray(rec.t),
                annotated=rec.annotated,
            )
        except ValueError as e:
            raise SceneValidationError(f"camera {rec.frame_index}: {e}") from e
    return dict(sorted(cameras.items()))


def camera_records(cameras: Mapping[int, CameraFrame]) -> List[dict]:
    return [
        {
            "frame_index": cam.frame_index,
            "K": [float(v) for v in cam.intrinsics.ravel()],
            "R": [float(v) for v in cam.rotation.ravel()],
            "t": [float(v) for v in cam.translation],
            "annotated": bool(cam.annotated),
        }
        for _, cam in sorted(cameras.items())
    ]


# ----------------------------------------------------------------------------
# Depth and label rasters
# ----------------------------------------------------------------------------

def write_depth(path: str, depth: np.ndarray, fmt: str = "png16") -> None:
    """Write a depth map; non-finite pixels are stored as invalid."""
    if fmt == "png16":
        mm = np.where(np.isfinite(depth), np.round(depth * 1000.0), 0)
        mm = np.clip(mm, 0, np.iinfo(np.uint16).max).astype(np.uint16)
        Image.fromarray(mm).save(path)
    elif fmt == "f32":
        np.asarray(depth, dtype="<f4").tofile(path)
    else:
        raise ValueError(f"unknown depth format '{fmt}' (expected one of {DEPTH_FORMATS})")


def read_depth(path: str, fmt: str, size: Optional[Sequence[int]] = None) -> np.ndarray:
    """Depth in metres with NaN where the source marks no data."""
    if fmt == "png16":
        with Image.open(path) as img:
            mm = np.array(img, dtype=np.float64)
        return np.where(mm > 0, mm / 1000.0, np.nan)
    if fmt == "f32":
        if size is None:
            raise ValueError("float32 depth needs the raster size")
        width, height = size
        raw = np.fromfile(path, dtype="<f4").astype(np.float64)
        if raw.size != width * height:
            raise SceneValidationError(f"{path}: {raw.size} values, expected {width}x{height}")
        depth = raw.reshape(height, width)
        return np.where(np.isfinite(depth) & (depth > 0), depth, np.nan)
    raise ValueError(f"unknown depth format '{fmt}' (expected one of {DEPTH_FORMATS})")


def write_label_png(path: str, label: np.ndarray) -> None:
    """Element id + 1 per pixel as 16-bit PNG; 0 is background."""
    Image.fromarray((np.asarray(label) + 1).astype(np.uint16)).save(path)


def _depth_name(frame_index: int, fmt: str) -> str:
    return f"frame_{frame_index:06d}." + ("png" if fmt == "png16" else "f32")


def write_depth_maps(directory: str, depth: Mapping[int, np.ndarray], fmt: str = "png16") -> None:
    os.makedirs(directory, exist_ok=True)
    shapes = {d.shape for d in depth.values()}
    if len(shapes) > 1:
        raise ValueError("depth maps of one scene must share a size")
    height, width = shapes.pop() if shapes else (0, 0)
    for fi in sorted(depth):
        write_depth(os.path.join(directory, _depth_name(fi, fmt)), depth[fi], fmt)
    write_json(
        os.path.join(directory, DEPTH_MANIFEST),
        {"format": fmt, "width": width, "height": height, "frames": sorted(int(f) for f in depth)},
    )


def read_depth_maps(directory: str) -> Dict[int, np.ndarray]:
    manifest_path = os.path.join(directory, DEPTH_MANIFEST)
    manifest = read_json(manifest_path)
    try:
        fmt = manifest["format"]
        size = (int(manifest["width"]), int(manifest["height"]))
        frames = [int(f) for f in manifest["frames"]]
    except (KeyError, TypeError, ValueError) as e:
        raise SceneValidationError(f"{manifest_path}: malformed depth manifest") from e
    if fmt not in DEPTH_FORMATS:
        raise SceneValidationError(f"{manifest_path}: unknown depth format '{fmt}'")
    out = {}
    for fi in frames:
        path = os.path.join(directory, _depth_name(fi, fmt))
        try:
            out[fi] = read_depth(path, fmt, size)
        except (OSError, ValueError) as e:
            raise SceneValidationError(f"{path}: {e}") from e
    return out


# ----------------------------------------------------------------------------
# Bundles
# ----------------------------------------------------------------------------

def read_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise SceneValidationError(f"missing file: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise SceneValidationError(f"{path}: not valid JSON: {e}") from e


def write_json(path: str, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def validate_scene(bundle: SceneBundle) -> None:
    if not bundle.frames:
        raise SceneValidationError(f"scene '{bundle.scene_id}' has no annotated frames")
    missing = sorted(set(bundle.annotated_frames) - set(bundle.cameras))
    if missing:
        raise SceneValidationError(f"annotated frames without a camera: {missing}")
    sizes = {f.image_size for f in bundle.frames}
    if len(sizes) > 1:
        raise SceneValidationError(f"annotated frames disagree on image size: {sorted(sizes)}")


def load_scene(directory: str, request_id: Optional[str] = None) -> SceneBundle:
    """Read and validate a scene bundle directory."""
    logger = LayoutLogger()
    request_id = request_id or logger.generate_request_id()
    try:
        if not os.path.isdir(directory):
            raise SceneValidationError(f"scene directory not found: {directory}")
        cameras = parse_cameras(read_json(os.path.join(directory, CAMERAS_FILE)))
        frames = list(load_annotations(os.path.join(directory, ANNOTATIONS_FILE), request_id=request_id))
        tracks_path = os.path.join(directory, TRACKS_FILE)
        depth_dir = os.path.join(directory, DEPTH_DIR)
        gt_path = os.path.join(directory, GROUND_TRUTH_FILE)
        bundle = SceneBundle(
            scene_id=os.path.basename(os.path.normpath(directory)),
            cameras=cameras,
            frames=frames,
            tracks_path=tracks_path if os.path.exists(tracks_path) else None,
            depth=read_depth_maps(depth_dir) if os.path.isdir(depth_dir) else {},
            ground_truth=read_json(gt_path) if os.path.exists(gt_path) else None,
        )
        validate_scene(bundle)
    except (SceneValidationError, AnnotationError) as e:
        logger.log_warning(
            request_id,
            str(e),
            event_type="scene_validation_failed",
            context={"scene": directory, "error_type": type(e).__name__},
        )
        raise
    return bundle


def write_tracks(path: str, tracks: Mapping[int, Mapping[int, np.ndarray]]) -> None:
    records = [
        {
            "track_id": int(tid),
            "points": [
                {"frame": int(f), "x": float(p[0]), "y": float(p[1])}
                for f, p in sorted(tracks[tid].items())
            ],
        }
        for tid in sorted(tracks)
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f)
        f.write("\n")


def write_scene(
    directory: str,
    bundle: SceneBundle,
    tracks: Optional[Mapping[int, Mapping[int, np.ndarray]]] = None,
    depth_format: str = "png16",
) -> None:
    """Write a bundle directory (plus tracks and ground truth when given)."""
    os.makedirs(directory, exist_ok=True)
    write_json(os.path.join(directory, CAMERAS_FILE), camera_records(bundle.cameras))
    write_json(os.path.join(directory, ANNOTATIONS_FILE), annotations_to_records(bundle.frames))
    if tracks is not None:
        write_tracks(os.path.join(directory, TRACKS_FILE), tracks)
    if bundle.ground_truth is not None:
        write_json(os.path.join(directory, GROUND_TRUTH_FILE), bundle.ground_truth)
    if bundle.depth:
        write_depth_maps(os.path.join(directory, DEPTH_DIR), bundle.depth, depth_format)
