"""
Track Sources - Where point motion between consecutive frames comes from.

A source answers one question: given points in frame `src`, where are they
in the neighbouring frame `dst`, and which of them are still tracked?

- FileTrackSource: precomputed tracks (e.g. exported optical-flow tracks)
  used as a sparse motion field.
- OracleTrackSource: exact motion from a synthetic scene's ground truth,
  with occlusion and optional i.i.d. pixel noise.
"""

import json
from abc import ABC, abstractmethod
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.spatial import cKDTree

from roomlayout.config.models import TrackingConfig
from roomlayout.exceptions import TrackSourceError
from roomlayout.geometry import pixel_directions, project_many


class TrackSource(ABC):
    """Pluggable per-frame-pair point motion."""

    @property
    @abstractmethod
    def frames(self) -> List[int]:
        """Frame indices the source knows about, ascending."""

    @abstractmethod
    def covers(self, src: int, dst: int) -> bool:
        """True if motion between these neighbouring frames is available."""

    @abstractmethod
    def advance(self, src: int, dst: int, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Move (N, 2) points from frame src to frame dst.

        Returns:
            (points (N, 2), alive (N,) bool). Rows with alive=False are lost.
        """

    def observe(self, origin_frame: int, frame: int, points: np.ndarray) -> np.ndarray:
        """Recorded positions of the tracked points (identity by default)."""
        return points


# ----------------------------------------------------------------------------
# File-backed
# ----------------------------------------------------------------------------

class _TrackPoint(BaseModel):
    frame: int
    x: float
    y: float


class _TrackRecord(BaseModel):
    track_id: int
    points: List[_TrackPoint]


def parse_track_records(data) -> Dict[int, Dict[int, np.ndarray]]:
    """Decoded tracks.json -> {track_id: {frame: (x, y)}}."""
    if not isinstance(data, list):
        raise TrackSourceError("track file must hold an array of track records")
    try:
        records = [_TrackRecord.model_validate(item) for item in data]
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise TrackSourceError(f"malformed track record at '{where}': {first['msg']}") from e

    tracks: Dict[int, Dict[int, np.ndarray]] = {}
    for rec in records:
        if rec.track_id in tracks:
            raise TrackSourceError(f"duplicate track_id {rec.track_id}")
        pts = {}
        for p in rec.points:
            xy = np.array([p.x, p.y], dtype=np.float64)
            if not np.all(np.isfinite(xy)):
                raise TrackSourceError(f"track {rec.track_id}: non-finite point in frame {p.frame}")
            pts[p.frame] = xy
        tracks[rec.track_id] = pts
    return tracks


class FileTrackSource(TrackSource):
    """
    Precomputed tracks interpreted as a sparse motion field.

    A query point that coincides with a file track follows it exactly;
    otherwise its displacement is the inverse-distance-weighted mean of the
    nearest file tracks within `flow_radius_px`. No neighbour -> lost.
    """

    _EXACT = 1e-9

    def __init__(
        self,
        tracks: Dict[int, Dict[int, np.ndarray]],
        frame_indices: Optional[Sequence[int]] = None,
        cfg: Optional[TrackingConfig] = None,
    ):
        self.cfg = cfg or TrackingConfig()
        self._frames = sorted(set(frame_indices) if frame_indices is not None
                              else {f for pts in tracks.values() for f in pts})
        # (src, dst) -> (src points, dst points)
        pairs: Dict[Tuple[int, int], Tuple[list, list]] = defaultdict(lambda: ([], []))
        for pts in tracks.values():
            frames = sorted(pts)
            for a, b in zip(frames[:-1], frames[1:]):
                for src, dst in ((a, b), (b, a)):
                    pairs[(src, dst)][0].append(pts[src])
                    pairs[(src, dst)][1].append(pts[dst])
        self._fields: Dict[Tuple[int, int], Tuple[cKDTree, np.ndarray]] = {}
        for key, (src_pts, dst_pts) in pairs.items():
            src_arr = np.asarray(src_pts)
            self._fields[key] = (cKDTree(src_arr), np.asarray(dst_pts) - src_arr)

    @classmethod
    def from_file(
        cls,
        path: str,
        frame_indices: Optional[Sequence[int]] = None,
        cfg: Optional[TrackingConfig] = None,
    ) -> "FileTrackSource":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise TrackSourceError(f"track file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise TrackSourceError(f"{path}: not valid JSON: {e}") from e
        return cls(parse_track_records(data), frame_indices=frame_indices, cfg=cfg)

    @property
    def frames(self) -> List[int]:
        return self._frames

    def covers(self, src: int, dst: int) -> bool:
        return (src, dst) in self._fields

    def advance(self, src: int, dst: int, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if not self.covers(src, dst):
            raise TrackSourceError("no track data", frame_pair=(src, dst))
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(pts) == 0:
            return pts.copy(), np.zeros(0, dtype=bool)
        tree, disp = self._fields[(src, dst)]
        k = min(self.cfg.flow_neighbors, tree.n)
        dist, idx = tree.query(pts, k=k, distance_upper_bound=self.cfg.flow_radius_px)
        dist = np.asarray(dist).reshape(len(pts), k)
        idx = np.asarray(idx).reshape(len(pts), k)

        found = np.isfinite(dist)
        alive = found.any(axis=1)
        out = np.full_like(pts, np.nan)
        for i in np.flatnonzero(alive):
            d, j = dist[i][found[i]], idx[i][found[i]]
            if d[0] <= self._EXACT:
                out[i] = pts[i] + disp[j[0]]
                continue
            w = 1.0 / d
            out[i] = pts[i] + (w[:, None] * disp[j]).sum(axis=0) / w.sum()
        return out, alive


# ----------------------------------------------------------------------------
# Synthetic oracle
# ----------------------------------------------------------------------------

class OracleTrackSource(TrackSource):
    """
    Exact motion from ground truth.

    `scene` must provide `cameras` (CameraFrame list) and
    `raycast(camera, pixels) -> (element_ids, depths)`; points are lost when
    the surface they sit on is hidden in the destination frame.
    """

    _DEPTH_TOL = 1e-6

    def __init__(self, scene, noise_px: float = 0.0, seed: int = 0, dropout: float = 0.0):
        self.scene = scene
        self.noise_px = float(noise_px)
        self.seed = int(seed)
        self.dropout = float(dropout)
        self._cameras = {c.frame_index: c for c in scene.cameras}
        self._frames = sorted(self._cameras)

    @property
    def frames(self) -> List[int]:
        return self._frames

    def covers(self, src: int, dst: int) -> bool:
        return src in self._cameras and dst in self._cameras

    def advance(self, src: int, dst: int, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(pts) == 0:
            return pts.copy(), np.zeros(0, dtype=bool)
        cam_src, cam_dst = self._cameras[src], self._cameras[dst]
        ids, depth = self.scene.raycast(cam_src, pts)
        hit = ids >= 0
        dirs = pixel_directions(cam_src, pts)
        world = cam_src.center + depth[:, None] * dirs

        out = np.full_like(pts, np.nan)
        alive = np.zeros(len(pts), dtype=bool)
        if not hit.any():
            return out, alive
        pix, z = project_many(cam_dst, world[hit])
        in_front = z > 0
        dst_ids, dst_depth = self.scene.raycast(cam_dst, np.where(in_front[:, None], pix, 0.0))
        expected = np.linalg.norm(world[hit] - cam_dst.center, axis=1)
        visible = in_front & (dst_ids == ids[hit]) & (
            np.abs(dst_depth - expected) <= self._DEPTH_TOL * np.maximum(1.0, expected)
        )
        if self.dropout > 0:
            rng = np.random.default_rng((self.seed, src, dst, 1))
            visible &= rng.random(len(visible)) >= self.dropout
        rows = np.flatnonzero(hit)
        out[rows] = pix
        alive[rows] = visible
        return out, alive

    def observe(self, origin_frame: int, frame: int, points: np.ndarray) -> np.ndarray:
        if self.noise_px <= 0 or frame == origin_frame:
            return points
        rng = np.random.default_rng((self.seed, origin_frame, frame))
        return points + rng.normal(0.0, self.noise_px, size=points.shape)
