"""
Geometry - Cameras, planes, rays and the unprojection primitive.

Conventions:
- Poses are stored world->camera: X_cam = R @ X_world + t.
- Pixel coordinates are pixel-centre aligned: integer (u, v) is the centre
  of column u, row v.
- A plane is {X : normal . X + offset = 0} with a unit normal.

Every loss term and the extent builder go through `unproject`; the
vectorised `unproject_many` is what the solver calls per iteration.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Tuple

import numpy as np

from roomlayout.exceptions import BehindCameraError, NearParallelError

# |normal . direction| at or below this is treated as grazing.
PARALLEL_EPS = 1e-6
# Intersections farther than this along the ray count as grazing too.
MAX_DEPTH = 1000.0
_ORTHO_TOL = 1e-6


def _frozen_array(value, shape: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """Per-frame intrinsics and world->camera pose."""

    frame_index: int
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    annotated: bool = False

    def __post_init__(self):
        K = _frozen_array(self.intrinsics, (3, 3), "intrinsics")
        R = _frozen_array(self.rotation, (3, 3), "rotation")
        t = _frozen_array(self.translation, (3,), "translation")

        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            raise ValueError(f"frame {self.frame_index}: rotation is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError(f"frame {self.frame_index}: rotation is a reflection")
        if np.any(np.abs(np.tril(K, -1)) > 0):
            raise ValueError(f"frame {self.frame_index}: intrinsics not upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] <= 0:
            raise ValueError(f"frame {self.frame_index}: focal entries must be positive")

        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @cached_property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates (-R^T t)."""
        c = -self.rotation.T @ self.translation
        c.setflags(write=False)
        return c

    @cached_property
    def intrinsics_inv(self) -> np.ndarray:
        k_inv = np.linalg.inv(self.intrinsics)
        k_inv.setflags(write=False)
        return k_inv

    def depth_of(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame z of world points, shape (N,)."""
        pts = np.atleast_2d(points)
        return pts @ self.rotation[2] + self.translation[2]


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane equation normal . X + offset = 0 with unit normal."""

    normal: np.ndarray
    offset: float
    element_id: int = -1

    def __post_init__(self):
        n = np.array(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0.0 or not np.isfinite(self.offset):
            raise ValueError("plane parameters must be finite with a non-zero normal")
        n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    @classmethod
    def from_vector(cls, params, element_id: int = -1) -> "Plane":
        """Build from a raw 4-vector (scaled normal, scaled offset)."""
        p = np.asarray(params, dtype=np.float64).reshape(4)
        return cls(normal=p[:3], offset=float(p[3]), element_id=element_id)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.normal, [self.offset]])

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.normal + self.offset


@dataclass(frozen=True, eq=False)
class Ray:
    """Half-line from a camera centre through a pixel."""

    origin: np.ndarray
    direction: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.array(self.direction, dtype=np.float64).reshape(3)
        d = d / np.linalg.norm(d)
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        d.setflags(write=False)
        o.setflags(write=False)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "origin", o)

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


def pixel_directions(camera: CameraFrame, pixels: np.ndarray) -> np.ndarray:
    """Unit world-frame ray directions for (N, 2) pixels, oriented forward."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    homog = np.column_stack([px, np.ones(len(px))])
    d_cam = homog @ camera.intrinsics_inv.T
    # K upper-triangular with K[2,2] > 0 keeps z positive; flip guards sign anyway.
    d_cam *= np.sign(d_cam[:, 2:3]) + (d_cam[:, 2:3] == 0)
    d_world = d_cam @ camera.rotation
    return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)


def pixel_ray(camera: CameraFrame, pixel) -> Ray:
    """Ray from the camera centre through `pixel`."""
    direction = pixel_directions(camera, np.asarray(pixel, dtype=np.float64).reshape(1, 2))[0]
    return Ray(origin=camera.center, direction=direction)


def intersect_ray_plane(origin: np.ndarray, direction: np.ndarray, plane: Plane) -> np.ndarray:
    """Ray/plane intersection with the grazing, depth-cap and behind checks."""
    denom = float(plane.normal @ direction)
    if abs(denom) <= PARALLEL_EPS:
        raise NearParallelError(f"ray grazes plane {plane.element_id} (n.d={denom:.3g})")
    s = -(float(plane.normal @ origin) + plane.offset) / denom
    if s <= 0.0:
        raise BehindCameraError(f"plane {plane.element_id} is behind the camera (s={s:.3g})")
    if s > MAX_DEPTH:
        raise NearParallelError(f"intersection with plane {plane.element_id} beyond {MAX_DEPTH} m")
    point = origin + s * direction
    # Snap onto the plane to remove rounding drift.
    return point - (plane.normal @ point + plane.offset) * plane.normal


def unproject(pixel, plane: Plane, camera: CameraFrame) -> np.ndarray:
    """Intersect the ray through `pixel` with `plane`; returns a world point."""
    ray = pixel_ray(camera, pixel)
    return intersect_ray_plane(ray.origin, ray.direction, plane)


def unproject_many(
    pixels: np.ndarray,
    plane: Plane,
    camera: CameraFrame,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised unprojection.

    Returns:
        (points (N, 3), valid (N,)) - invalid rows (grazing, behind, beyond
        the depth cap) hold NaN.
    """
    dirs = pixel_directions(camera, pixels)
    origin = camera.center
    denom = dirs @ plane.normal
    numer = -(origin @ plane.normal + plane.offset)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = numer / denom
    valid = (np.abs(denom) > PARALLEL_EPS) & (s > 0.0) & (s <= MAX_DEPTH)
    points = np.full((len(dirs), 3), np.nan)
    points[valid] = origin + s[valid, None] * dirs[valid]
    return points, valid


def project(camera: CameraFrame, point) -> np.ndarray:
    """Pinhole projection K (R X + t), dehomogenised."""
    X = np.asarray(point, dtype=np.float64).reshape(3)
    x_cam = camera.rotation @ X + camera.translation
    if x_cam[2] <= 0.0:
        raise BehindCameraError(f"point has non-positive depth {x_cam[2]:.3g}")
    h = camera.intrinsics @ x_cam
    return h[:2] / h[2]


def project_many(camera: CameraFrame, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns (pixels (N, 2), depth (N,))."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x_cam = pts @ camera.rotation.T + camera.translation
    depth = x_cam[:, 2].copy()
    h = x_cam @ camera.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = h[:, :2] / h[:, 2:3]
    return pix, depth


def look_at_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World->camera rotation for a camera looking along `forward` (x right, y down)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.vstack([right, down, f])


def plane_intersection_line(a: Plane, b: Plane, parallel_cos: float = 0.999):
    """
    Line shared by two planes as (point, unit direction), or None when the
    planes are (nearly) parallel.
    """
    if abs(float(a.normal @ b.normal)) > parallel_cos:
        return None
    direction = np.cross(a.normal, b.normal)
    direction /= np.linalg.norm(direction)
    # Point on both planes closest to the world origin.
    A = np.vstack([a.normal, b.normal, direction])
    rhs = np.array([-a.offset, -b.offset, 0.0])
    point = np.linalg.solve(A, rhs)
    return point, direction
