"""
Evaluation - Software rasterizer, Reprojection IoU, depth error and
best-of-R quality control.

Pixel (i, j) is sampled at its centre, which sits at image coordinates
(i, j); the image covers [-0.5, W - 0.5] x [-0.5, H - 0.5]. Annotation masks
are rasterized on the same grid so IoU compares like with like.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry.base import BaseGeometry

from roomlayout.annotations import FrameAnnotation
from roomlayout.config.models import QCConfig
from roomlayout.exceptions import NoValidPixelsError
from roomlayout.extent import LayoutMesh
from roomlayout.geometry import CameraFrame
from roomlayout.tracking import ElementRegistry
from utils.logger import LayoutLogger, technical_trace

BACKGROUND = -1
# Camera-frame z below this is clipped away before rasterization (m).
NEAR_PLANE = 1e-3
# Barycentric slack so pixels centred exactly on a shared edge are covered.
_EDGE_EPS = 1e-9


@dataclass(eq=False)
class LabelDepthImage:
    width: int
    height: int
    label: np.ndarray  # (H, W) int, BACKGROUND where empty
    depth: np.ndarray  # (H, W) float, inf where empty

    @classmethod
    def blank(cls, width: int, height: int) -> "LabelDepthImage":
        return cls(
            width,
            height,
            np.full((height, width), BACKGROUND, dtype=np.int64),
            np.full((height, width), np.inf),
        )

    def mask(self, element_id: int) -> np.ndarray:
        return self.label == element_id


# ----------------------------------------------------------------------------
# Rasterizer
# ----------------------------------------------------------------------------

def _clip_near(tri: np.ndarray) -> List[np.ndarray]:
    """Clip one camera-frame triangle against z = NEAR_PLANE; returns a fan."""
    z = tri[:, 2]
    if np.all(z >= NEAR_PLANE):
        return [tri]
    if np.all(z < NEAR_PLANE):
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        a_in, b_in = a[2] >= NEAR_PLANE, b[2] >= NEAR_PLANE
        if a_in:
            poly.append(a)
        if a_in != b_in:
            s = (NEAR_PLANE - a[2]) / (b[2] - a[2])
            poly.append(a + s * (b - a))
    return [np.array([poly[0], poly[k], poly[k + 1]]) for k in range(1, len(poly) - 1)]


def _draw(image: LabelDepthImage, tri_cam: np.ndarray, K: np.ndarray, element_id: int) -> None:
    """Z-buffered fill of one camera-frame triangle with z >= NEAR_PLANE."""
    h = tri_cam @ K.T
    pix = h[:, :2] / h[:, 2:3]
    inv_z = 1.0 / tri_cam[:, 2]

    x0 = max(int(np.ceil(pix[:, 0].min())), 0)
    x1 = min(int(np.floor(pix[:, 0].max())), image.width - 1)
    y0 = max(int(np.ceil(pix[:, 1].min())), 0)
    y1 = min(int(np.floor(pix[:, 1].max())), image.height - 1)
    if x0 > x1 or y0 > y1:
        return

    (ax, ay), (bx, by), (cx, cy) = pix
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if abs(area) < 1e-12:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1, dtype=np.float64), np.arange(y0, y1 + 1, dtype=np.float64))
    w0 = ((bx - xs) * (cy - ys) - (by - ys) * (cx - xs)) / area
    w1 = ((cx - xs) * (ay - ys) - (cy - ys) * (ax - xs)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= -_EDGE_EPS) & (w1 >= -_EDGE_EPS) & (w2 >= -_EDGE_EPS)
    if not inside.any():
        return

    # 1/z is affine in screen space for a planar triangle.
    z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2])
    depth = image.depth[y0:y1 + 1, x0:x1 + 1]
    label = image.label[y0:y1 + 1, x0:x1 + 1]
    nearer = inside & (z < depth)
    depth[nearer] = z[nearer]
    label[nearer] = element_id


def rasterize(mesh: LayoutMesh, camera: CameraFrame, size: Tuple[int, int]) -> LabelDepthImage:
    """Label and depth (camera-frame z) image of the mesh seen from `camera`."""
    width, height = size
    image = LabelDepthImage.blank(width, height)
    if len(mesh.triangles) == 0:
        return image
    cam_pts = mesh.vertices @ camera.rotation.T + camera.translation
    K = camera.intrinsics
    for tri_idx, element_id in zip(mesh.triangles, mesh.element_ids):
        for piece in _clip_near(cam_pts[tri_idx]):
            _draw(image, piece, K, int(element_id))
    return image


def scaled_camera(camera: CameraFrame, scale_x: float, scale_y: float) -> CameraFrame:
    """Camera for an image resampled by (scale_x, scale_y), pixel centres kept."""
    A = np.array([
        [scale_x, 0.0, 0.5 * scale_x - 0.5],
        [0.0, scale_y, 0.5 * scale_y - 0.5],
        [0.0, 0.0, 1.0],
    ])
    return CameraFrame(
        frame_index=camera.frame_index,
        intrinsics=A @ camera.intrinsics,
        rotation=camera.rotation,
        translation=camera.translation,
        annotated=camera.annotated,
    )


def _scaled_geometry(geom: BaseGeometry, scale_x: float, scale_y: float) -> BaseGeometry:
    if scale_x == 1.0 and scale_y == 1.0:
        return geom
    factor = np.array([scale_x, scale_y])
    shift = 0.5 * factor - 0.5
    return shapely.transform(geom, lambda c: c * factor + shift)


# ----------------------------------------------------------------------------
# Masks and IoU
# ----------------------------------------------------------------------------

def annotation_mask(geom: BaseGeometry, size: Tuple[int, int]) -> np.ndarray:
    """Pixels whose centre lies in or on the polygon."""
    width, height = size
    mask = np.zeros((height, width), dtype=bool)
    if geom is None or geom.is_empty:
        return mask
    minx, miny, maxx, maxy = geom.bounds
    x0, x1 = max(int(np.ceil(minx)), 0), min(int(np.floor(maxx)), width - 1)
    y0, y1 = max(int(np.ceil(miny)), 0), min(int(np.floor(maxy)), height - 1)
    if x0 > x1 or y0 > y1:
        return mask
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1, dtype=np.float64), np.arange(y0, y1 + 1, dtype=np.float64))
    mask[y0:y1 + 1, x0:x1 + 1] = shapely.intersects_xy(geom, xs, ys)
    return mask


def iou(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Intersection over union of two boolean masks; None when both are empty."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return None
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class IoUReport:
    mean_iou: float
    frame_mean_iou: float
    per_frame: Dict[int, float] = field(default_factory=dict)
    per_element: Dict[int, float] = field(default_factory=dict)
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "frame_mean_iou": self.frame_mean_iou,
            "per_frame": {str(k): v for k, v in sorted(self.per_frame.items())},
            "per_element": {str(k): v for k, v in sorted(self.per_element.items())},
            "pairs": [{"frame_index": f, "element_id": e, "iou": v} for f, e, v in self.pairs],
        }


@technical_trace
def reprojection_iou(
    mesh: LayoutMesh,
    frames: Sequence[FrameAnnotation],
    cameras: Mapping[int, CameraFrame],
    registry: ElementRegistry,
    size: Optional[Tuple[int, int]] = None,
) -> IoUReport:
    """
    Per (frame, element) IoU between the rendered label mask and the
    rasterized amodal annotation. Elements rendered in a frame without being
    annotated there count with IoU 0; pairs empty on both sides are skipped.
    """
    pairs: List[Tuple[int, int, float]] = []
    per_frame: Dict[int, float] = {}
    for fa in sorted(frames, key=lambda f: f.frame_index):
        cam = cameras.get(fa.frame_index)
        if cam is None:
            continue
        render_size = size or fa.image_size
        sx = render_size[0] / fa.image_size[0]
        sy = render_size[1] / fa.image_size[1]
        if (sx, sy) != (1.0, 1.0):
            cam = scaled_camera(cam, sx, sy)
        image = rasterize(mesh, cam, render_size)

        annotated: Dict[int, np.ndarray] = {}
        for elem in fa.elements:
            gid = registry.mapping.get((fa.frame_index, elem.local_id))
            if gid is None:
                continue
            m = annotation_mask(_scaled_geometry(elem.amodal, sx, sy), render_size)
            annotated[gid] = annotated[gid] | m if gid in annotated else m
        rendered_ids = set(np.unique(image.label).tolist()) - {BACKGROUND}

        frame_scores = []
        for gid in sorted(set(annotated) | rendered_ids):
            empty = np.zeros_like(image.label, dtype=bool)
            score = iou(image.mask(gid), annotated.get(gid, empty))
            if score is None:
                continue
            pairs.append((fa.frame_index, gid, score))
            frame_scores.append(score)
        if frame_scores:
            per_frame[fa.frame_index] = float(np.mean(frame_scores))

    by_element: Dict[int, List[float]] = {}
    for _, gid, score in pairs:
        by_element.setdefault(gid, []).append(score)
    return IoUReport(
        mean_iou=float(np.mean([p[2] for p in pairs])) if pairs else 0.0,
        frame_mean_iou=float(np.mean(list(per_frame.values()))) if per_frame else 0.0,
        per_frame=per_frame,
        per_element={gid: float(np.mean(v)) for gid, v in sorted(by_element.items())},
        pairs=pairs,
    )


# ----------------------------------------------------------------------------
# Depth error
# ----------------------------------------------------------------------------

def visible_masks(frames: Sequence[FrameAnnotation]) -> Dict[int, np.ndarray]:
    """Union of every element's visible parts, per annotated frame."""
    out = {}
    for fa in frames:
        parts = [e.visible for e in fa.elements if not e.visible.is_empty]
        geom = shapely.union_all(parts) if parts else None
        out[fa.frame_index] = annotation_mask(geom, fa.image_size)
    return out


def depth_error(
    mesh: LayoutMesh,
    cameras: Mapping[int, CameraFrame],
    gt_depth: Mapping[int, np.ndarray],
    masks: Mapping[int, np.ndarray],
) -> float:
    """
    Mean |rendered - ground truth| depth over visible-part pixels with a
    valid (finite, positive) ground truth and a rendered surface.
    """
    total = 0.0
    count = 0
    for fi in sorted(gt_depth):
        if fi not in cameras or fi not in masks:
            continue
        gt = np.asarray(gt_depth[fi], dtype=np.float64)
        height, width = gt.shape
        image = rasterize(mesh, cameras[fi], (width, height))
        ok = masks[fi] & np.isfinite(gt) & (gt > 0) & np.isfinite(image.depth)
        n = int(ok.sum())
        if n:
            total += float(np.abs(image.depth[ok] - gt[ok]).sum())
            count += n
    if count == 0:
        raise NoValidPixelsError("no pixel has both a valid ground-truth and a rendered depth")
    return total / count


# ----------------------------------------------------------------------------
# Quality control
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class QCDecision:
    best_index: int
    best_iou: float
    accepted: bool
    passes_threshold: bool

    def to_dict(self) -> dict:
        return {
            "best_run": self.best_index,
            "best_iou": self.best_iou,
            "accepted": self.accepted,
            "passes_threshold": self.passes_threshold,
        }


def select_best_run(
    scores: Sequence[Optional[float]],
    cfg: Optional[QCConfig] = None,
    request_id: Optional[str] = None,
) -> QCDecision:
    """
    Pick the run with the highest mean IoU (failed runs, given as None,
    score 0; ties go to the lowest index) and apply the acceptance threshold.
    """
    cfg = cfg or QCConfig()
    if not scores:
        raise ValueError("select_best_run needs at least one run")
    values = np.array([0.0 if s is None else float(s) for s in scores])
    best = int(np.argmax(values))
    passes = bool(values[best] >= cfg.iou_threshold)
    decision = QCDecision(
        best_index=best,
        best_iou=float(values[best]),
        accepted=passes or not cfg.enforce_threshold,
        passes_threshold=passes,
    )
    LayoutLogger().log(
        request_id or "qc",
        "qc_decision",
        severity="INFO" if decision.accepted else "WARNING",
        context={"qc": {**decision.to_dict(), "runs": len(values), "threshold": cfg.iou_threshold}},
    )
    return decision
