"""
Annotations - Ingest per-frame structural-element polygons and extract the
boundary edge points used by the edge loss.

File shape (see FORMATS.md and config/annotation_schema.json):
    [{frame_index, width, height,
      elements: [{local_id, class, amodal: [ring...], visible: [ring...]}],
      occlusion_edges: [[[x, y], ...], ...]}, ...]

Ring winding decides its role: positive shoelace area (counter-clockwise
in x/y) is an outer boundary, negative is a hole.
"""

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from shapely.geometry import LineString, MultiLineString, MultiPolygon, Polygon
from shapely.geometry.base import BaseGeometry
from shapely.geometry.polygon import orient

from roomlayout.config.models import EdgeConfig
from roomlayout.exceptions import AnnotationParseError, AnnotationValidationError
from utils.logger import LayoutLogger

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "config", "annotation_schema.json")

MIN_RING_AREA = 1.0


class StructuralClass(str, Enum):
    FLOOR = "Floor"
    CEILING = "Ceiling"
    WALL = "Wall"
    SLANTED = "Slanted"
    DOOR = "Door"
    WINDOW = "Window"

    @property
    def class_id(self) -> int:
        return _CLASS_IDS[self]

    @property
    def is_opening(self) -> bool:
        """Doors and windows lie in their host's plane."""
        return self in (StructuralClass.DOOR, StructuralClass.WINDOW)

    @classmethod
    def from_id(cls, class_id: int) -> "StructuralClass":
        return _CLASSES_BY_ID[class_id]


_CLASS_IDS = {
    StructuralClass.FLOOR: 0,
    StructuralClass.CEILING: 1,
    StructuralClass.WALL: 2,
    StructuralClass.SLANTED: 3,
    StructuralClass.DOOR: 4,
    StructuralClass.WINDOW: 5,
}
_CLASSES_BY_ID = {v: k for k, v in _CLASS_IDS.items()}


@dataclass(frozen=True, eq=False)
class ElementAnnotation:
    local_id: int
    cls: StructuralClass
    amodal: BaseGeometry
    visible: BaseGeometry


@dataclass(frozen=True, eq=False)
class OcclusionEdge:
    polyline: np.ndarray
    frame_index: int


@dataclass(frozen=True, eq=False)
class FrameAnnotation:
    frame_index: int
    elements: Tuple[ElementAnnotation, ...]
    occlusion_edges: Tuple[OcclusionEdge, ...]
    image_size: Tuple[int, int]

    def element(self, local_id: int) -> ElementAnnotation:
        for elem in self.elements:
            if elem.local_id == local_id:
                return elem
        raise KeyError(f"frame {self.frame_index} has no element {local_id}")

    @property
    def local_ids(self) -> List[int]:
        return [e.local_id for e in self.elements]


@dataclass(frozen=True)
class EdgePoint:
    pixel: Tuple[float, float]
    frame_index: int
    element_a: int
    element_b: int


@dataclass
class LoadedAnnotations:
    """Parsed frames plus the number of degenerate polygons dropped."""

    frames: List[FrameAnnotation] = field(default_factory=list)
    warnings: int = 0

    def __iter__(self) -> Iterator[FrameAnnotation]:
        return iter(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


# ----------------------------------------------------------------------------
# Raw records
# ----------------------------------------------------------------------------

Ring = List[Tuple[float, float]]


class _ElementRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    local_id: int
    cls: str = Field(alias="class")
    amodal: List[Ring]
    visible: List[Ring] = []


class _FrameRecord(BaseModel):
    frame_index: int
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    elements: List[_ElementRecord]
    occlusion_edges: List[Ring] = []


# ----------------------------------------------------------------------------
# Polygon assembly
# ----------------------------------------------------------------------------

def signed_area(ring: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise rings."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygonal(geom: Optional[BaseGeometry]) -> BaseGeometry:
    """Keep only the areal parts of a geometry (make_valid can emit lines)."""
    if geom is None or geom.is_empty:
        return MultiPolygon()
    if isinstance(geom, (Polygon, MultiPolygon)):
        return geom
    parts = [g for g in getattr(geom, "geoms", []) if isinstance(g, (Polygon, MultiPolygon))]
    if not parts:
        return MultiPolygon()
    return shapely.union_all(parts)


def _clean_ring(raw: Sequence) -> np.ndarray:
    ring = np.asarray(raw, dtype=np.float64).reshape(-1, 2)
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    # drop consecutive duplicates
    if len(ring) > 1:
        keep = np.any(np.diff(ring, axis=0, append=ring[:1]) != 0, axis=1)
        ring = ring[keep]
    return ring


def rings_to_geometry(rings: Sequence[Sequence]) -> Tuple[BaseGeometry, int]:
    """
    Assemble winding-coded rings into a valid (multi)polygon.

    Returns:
        (geometry, dropped) where dropped counts degenerate or orphaned rings.
    """
    dropped = 0
    outers: List[np.ndarray] = []
    holes: List[np.ndarray] = []
    for raw in rings:
        ring = _clean_ring(raw)
        if len(np.unique(ring, axis=0)) < 3:
            dropped += 1
            continue
        area = signed_area(ring)
        if abs(area) < MIN_RING_AREA:
            dropped += 1
            continue
        (outers if area > 0 else holes).append(ring)

    outer_polys = [Polygon(r) for r in outers]
    hole_sets: List[List[np.ndarray]] = [[] for _ in outers]
    for hole in holes:
        probe = Polygon(hole).representative_point()
        containing = [i for i, p in enumerate(outer_polys) if p.contains(probe)]
        if not containing:
            dropped += 1
            continue
        smallest = min(containing, key=lambda i: outer_polys[i].area)
        hole_sets[smallest].append(hole)

    parts = []
    for ring, ring_holes in zip(outers, hole_sets):
        poly = Polygon(ring, ring_holes)
        if not poly.is_valid:
            poly = shapely.make_valid(poly)
        parts.append(polygonal(poly))
    if not parts:
        return MultiPolygon(), dropped
    return shapely.union_all(parts), dropped


def geometry_to_rings(geom: BaseGeometry) -> List[List[List[float]]]:
    """Inverse of rings_to_geometry: outer rings CCW, holes CW, unclosed."""
    rings: List[List[List[float]]] = []
    polys = [geom] if isinstance(geom, Polygon) else list(getattr(geom, "geoms", []))
    for poly in polys:
        if poly.is_empty:
            continue
        poly = orient(poly, sign=1.0)
        for ring in [poly.exterior, *poly.interiors]:
            coords = np.asarray(ring.coords)[:-1]
            rings.append([[round(float(x), 6), round(float(y), 6)] for x, y in coords])
    return rings


# ----------------------------------------------------------------------------
# Loading
# ----------------------------------------------------------------------------

def _finite(rings: Sequence[Sequence], frame_index: int, local_id: Optional[int], what: str) -> None:
    for ring in rings:
        if len(ring) and not np.all(np.isfinite(np.asarray(ring, dtype=np.float64))):
            raise AnnotationValidationError(f"non-finite coordinate in {what}", frame_index, local_id)


def _build_frame(record: _FrameRecord) -> Tuple[FrameAnnotation, int]:
    fi = record.frame_index
    warnings = 0
    seen = set()
    elements = []
    for er in record.elements:
        if er.local_id in seen:
            raise AnnotationValidationError("duplicate local_id", fi, er.local_id)
        seen.add(er.local_id)
        try:
            cls = StructuralClass(er.cls)
        except ValueError:
            raise AnnotationValidationError(
                f"unknown class '{er.cls}' (allowed: {[c.value for c in StructuralClass]})",
                fi,
                er.local_id,
            )
        _finite(er.amodal, fi, er.local_id, "amodal")
        _finite(er.visible, fi, er.local_id, "visible")

        amodal, dropped_a = rings_to_geometry(er.amodal)
        visible, dropped_v = rings_to_geometry(er.visible)
        warnings += dropped_a + dropped_v
        if amodal.is_empty:
            continue
        # Visible parts never exceed the element's own surface.
        visible = polygonal(visible.intersection(amodal)) if not visible.is_empty else visible
        elements.append(ElementAnnotation(er.local_id, cls, amodal, visible))

    edges = []
    for line in record.occlusion_edges:
        pts = _clean_ring(line) if len(line) else np.zeros((0, 2))
        if len(pts) < 2:
            raise AnnotationValidationError("occlusion edge needs at least 2 vertices", fi)
        _finite([line], fi, None, "occlusion edge")
        edges.append(OcclusionEdge(polyline=pts, frame_index=fi))

    frame = FrameAnnotation(
        frame_index=fi,
        elements=tuple(sorted(elements, key=lambda e: e.local_id)),
        occlusion_edges=tuple(edges),
        image_size=(record.width, record.height),
    )
    return frame, warnings


def parse_annotations(data, request_id: Optional[str] = None) -> LoadedAnnotations:
    """Validate already-decoded JSON data (a list of frame records)."""
    if not isinstance(data, list):
        raise AnnotationParseError(f"top level must be an array of frame records (schema: {SCHEMA_PATH})")
    try:
        records = [_FrameRecord.model_validate(item) for item in data]
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise AnnotationParseError(f"malformed annotation record at '{where}': {first['msg']} (schema: {SCHEMA_PATH})") from e

    logger = LayoutLogger()
    request_id = request_id or logger.generate_request_id()
    loaded = LoadedAnnotations()
    seen_frames = set()
    for record in records:
        if record.frame_index in seen_frames:
            raise AnnotationValidationError("duplicate frame record", record.frame_index)
        seen_frames.add(record.frame_index)
        frame, warnings = _build_frame(record)
        if warnings:
            logger.log_warning(
                request_id,
                f"dropped {warnings} degenerate ring(s)",
                event_type="degenerate_polygon_dropped",
                context={"frame_index": record.frame_index, "dropped": warnings},
            )
        loaded.frames.append(frame)
        loaded.warnings += warnings

    loaded.frames.sort(key=lambda f: f.frame_index)
    logger.log_stage(
        request_id,
        "annotations_loaded",
        counts={
            "frames": len(loaded.frames),
            "elements": sum(len(f.elements) for f in loaded.frames),
            "warnings": loaded.warnings,
        },
    )
    return loaded


def load_annotations(path: str, request_id: Optional[str] = None) -> LoadedAnnotations:
    """Read and validate an annotation file."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise AnnotationParseError(f"annotation file not found: {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise AnnotationParseError(f"{path}: not valid JSON: {e}") from e
    return parse_annotations(data, request_id=request_id)


def annotations_to_records(frames: Sequence[FrameAnnotation]) -> List[dict]:
    """Serialise frames back into the file shape."""
    records = []
    for fa in frames:
        records.append(
            {
                "frame_index": fa.frame_index,
                "width": fa.image_size[0],
                "height": fa.image_size[1],
                "elements": [
                    {
                        "local_id": e.local_id,
                        "class": e.cls.value,
                        "amodal": geometry_to_rings(e.amodal),
                        "visible": geometry_to_rings(e.visible),
                    }
                    for e in fa.elements
                ],
                "occlusion_edges": [
                    [[round(float(x), 6), round(float(y), 6)] for x, y in oe.polyline]
                    for oe in fa.occlusion_edges
                ],
            }
        )
    return records


# ----------------------------------------------------------------------------
# Edge points
# ----------------------------------------------------------------------------

def _boundary_rings(geom: BaseGeometry) -> List[LineString]:
    polys = [geom] if isinstance(geom, Polygon) else list(getattr(geom, "geoms", []))
    rings = []
    for poly in polys:
        rings.append(LineString(poly.exterior.coords))
        rings.extend(LineString(r.coords) for r in poly.interiors)
    return rings


def _runs(mask: np.ndarray) -> List[Tuple[int, int]]:
    """(start, length) of True runs on a closed ring of samples."""
    n = len(mask)
    if n == 0 or not mask.any():
        return []
    if mask.all():
        return [(0, n)]
    # rotate so the sequence starts just after a False sample
    shift = int(np.argmin(mask))
    rolled = np.roll(mask, -shift)
    runs = []
    i = 0
    while i < n:
        if rolled[i]:
            j = i
            while j < n and rolled[j]:
                j += 1
            runs.append(((i + shift) % n, j - i))
            i = j
        else:
            i += 1
    return runs


def _pair_edge_pixels(
    a: ElementAnnotation,
    b: ElementAnnotation,
    occluders: Optional[BaseGeometry],
    cfg: EdgeConfig,
) -> List[Tuple[float, float]]:
    b_boundary = b.amodal.boundary
    pixels: List[Tuple[float, float]] = []
    for ring in _boundary_rings(a.amodal):
        length = ring.length
        if length <= 0:
            continue
        dist_along = np.arange(0.0, length, cfg.sample_step_px)
        samples = shapely.line_interpolate_point(ring, dist_along)
        xy = shapely.get_coordinates(samples)

        d = shapely.distance(samples, b_boundary)
        inside = shapely.contains_xy(b.amodal, xy[:, 0], xy[:, 1])
        near = np.where(inside, d <= cfg.overlap_tolerance_px, d <= cfg.boundary_tolerance_px)
        if not near.any():
            continue

        # Split the difference between the two annotated boundaries.
        mid = xy.copy()
        idx = np.flatnonzero(near)
        lines = shapely.shortest_line(samples[idx], b_boundary)
        q = shapely.get_coordinates(lines).reshape(-1, 2, 2)[:, 1]
        mid[idx] = 0.5 * (xy[idx] + q)

        if occluders is not None:
            far = shapely.distance(shapely.points(mid[idx]), occluders) >= cfg.occlusion_distance_px
            near[idx[~far]] = False

        for start, count in _runs(near):
            run_length = count * cfg.sample_step_px
            n_points = int(round(run_length / cfg.spacing_px))
            for k in range(n_points):
                offset = int((k + 0.5) * run_length / n_points / cfg.sample_step_px)
                j = (start + min(offset, count - 1)) % len(near)
                pixels.append((float(mid[j, 0]), float(mid[j, 1])))
    return pixels


def extract_edge_points(
    fa: FrameAnnotation,
    global_ids: Mapping[int, int],
    cfg: Optional[EdgeConfig] = None,
) -> List[EdgePoint]:
    """
    Edge points along boundaries shared by two structural elements.

    Doors/windows are skipped, stretches near occlusion edges are skipped,
    and each run of shared boundary yields round(length / spacing) points.
    """
    cfg = cfg or EdgeConfig()
    elements = [e for e in fa.elements if not e.cls.is_opening]
    missing = [e.local_id for e in elements if e.local_id not in global_ids]
    if missing:
        raise KeyError(f"frame {fa.frame_index}: no global id for local ids {missing}")

    occluders = None
    if fa.occlusion_edges:
        occluders = MultiLineString([oe.polyline for oe in fa.occlusion_edges])

    reach = max(cfg.boundary_tolerance_px, cfg.overlap_tolerance_px)
    points: List[EdgePoint] = []
    for i, a in enumerate(elements):
        for b in elements[i + 1:]:
            ga, gb = global_ids[a.local_id], global_ids[b.local_id]
            if ga == gb or a.amodal.distance(b.amodal) > reach:
                continue
            for px in _pair_edge_pixels(a, b, occluders, cfg):
                points.append(EdgePoint(pixel=px, frame_index=fa.frame_index, element_a=ga, element_b=gb))
    return points


def neighbor_pairs(edge_points: Sequence[EdgePoint]) -> List[Tuple[int, int]]:
    """Sorted unique global-id pairs that share at least one edge point."""
    pairs = {tuple(sorted((ep.element_a, ep.element_b))) for ep in edge_points}
    return sorted(pairs)


def frames_by_index(frames: Sequence[FrameAnnotation]) -> Dict[int, FrameAnnotation]:
    return {fa.frame_index: fa for fa in frames}
