"""
Extent - Finite spatial extent of every plane.

1. Amodal polygons of each annotated frame are unprojected onto the
   element's plane and expressed in a fixed 2D basis of that plane.
2. The per-frame polygons are unioned.
3. Neighbouring extents are extended toward their 3D intersection line and
   small overshoots past it are cut (both bounded by a 10% area rule).
4. Doors and windows are attached to the element they share most border
   with, added to its extent and also kept as their own polygon sets.
5. Everything is triangulated into a labeled mesh.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, MultiPolygon, Polygon
from shapely.geometry.base import BaseGeometry

from roomlayout.annotations import FrameAnnotation, StructuralClass, polygonal
from roomlayout.config.models import ExtentConfig
from roomlayout.exceptions import FullyInvalidError, NoHostError, TriangulationError
from roomlayout.geometry import MAX_DEPTH, PARALLEL_EPS, CameraFrame, Plane, plane_intersection_line
from roomlayout.tracking import ElementRegistry
from utils.logger import LayoutLogger, technical_trace

# Degenerate-triangle area threshold (m^2).
_MIN_TRIANGLE_AREA = 1e-12


@dataclass(frozen=True, eq=False)
class PlaneBasis:
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def for_plane(cls, plane: Plane) -> "PlaneBasis":
        """Deterministic basis: smallest-component axis crossed with the normal."""
        n = plane.normal
        axis = np.zeros(3)
        axis[int(np.argmin(np.abs(n)))] = 1.0
        u = np.cross(axis, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return cls(origin=-plane.offset * n, u=u, v=v)

    def to_2d(self, points: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(points) - self.origin
        return np.column_stack([d @ self.u, d @ self.v])

    def to_3d(self, points2d: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points2d)
        return self.origin + p[:, :1] * self.u + p[:, 1:2] * self.v


@dataclass(eq=False)
class PlanarPolygonSet:
    element_id: int
    plane: Plane
    geometry: BaseGeometry
    cls: Optional[StructuralClass] = None
    basis: PlaneBasis = field(default=None)

    def __post_init__(self):
        if self.basis is None:
            self.basis = PlaneBasis.for_plane(self.plane)

    @property
    def area(self) -> float:
        return float(self.geometry.area)

    @property
    def is_empty(self) -> bool:
        return self.geometry.is_empty


@dataclass(eq=False)
class LayoutMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int
    element_ids: np.ndarray  # (F,) int
    class_ids: np.ndarray  # (F,) int

    @classmethod
    def empty(cls) -> "LayoutMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    @property
    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def element_area(self, element_id: int) -> float:
        return float(self.triangle_areas[self.element_ids == element_id].sum())


# ----------------------------------------------------------------------------
# Unprojection of polygons
# ----------------------------------------------------------------------------

def _valid_region(bounds: Tuple[float, float, float, float], plane: Plane, camera: CameraFrame, margin: float) -> Optional[Polygon]:
    """
    Image-space half-plane (within `bounds`) whose rays hit `plane` in front
    of the camera, away from grazing angles and closer than the depth cap.
    """
    h = float(plane.normal @ camera.center + plane.offset)
    if h == 0.0:
        return None
    # n . d(p) = abc . [x, y, 1] for the unnormalised ray d = R^T K^-1 [x, y, 1].
    abc = camera.intrinsics_inv.T @ (camera.rotation @ plane.normal)
    sign = -np.sign(h)
    minx, miny, maxx, maxy = bounds
    corners = np.array([[minx, miny], [maxx, miny], [maxx, maxy], [minx, maxy]])
    homog = np.column_stack([corners, np.ones(4)])
    d_max = float(np.max(np.linalg.norm(homog @ camera.intrinsics_inv.T, axis=1)))
    tau = max(abs(h) / MAX_DEPTH * (1.0 + 1e-6), PARALLEL_EPS * 10, margin) * d_max

    # Sutherland-Hodgman clip of the bounds rectangle by sign * (abc . p) >= tau.
    def f(p):
        return sign * (abc[0] * p[0] + abc[1] * p[1] + abc[2]) - tau

    out = []
    for i in range(4):
        p, q = corners[i], corners[(i + 1) % 4]
        fp, fq = f(p), f(q)
        if fp >= 0:
            out.append(p)
        if (fp >= 0) != (fq >= 0):
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    if len(out) < 3:
        return None
    region = Polygon(out)
    return region if region.area > 0 else None


def map_geometry(geom: BaseGeometry, fn) -> BaseGeometry:
    polys = [geom] if isinstance(geom, Polygon) else list(getattr(geom, "geoms", []))
    out = []
    for poly in polys:
        if not isinstance(poly, Polygon) or poly.is_empty:
            continue
        ext = fn(np.asarray(poly.exterior.coords))
        holes = [fn(np.asarray(r.coords)) for r in poly.interiors]
        mapped = Polygon(ext, holes)
        if not mapped.is_valid:
            mapped = polygonal(shapely.make_valid(mapped))
        out.append(mapped)
    if not out:
        return MultiPolygon()
    return shapely.union_all(out)


def unproject_polygon(
    polygon: BaseGeometry,
    plane: Plane,
    camera: CameraFrame,
    cfg: Optional[ExtentConfig] = None,
) -> BaseGeometry:
    """
    Unproject an image polygon onto `plane`, clipped in image space to the
    part whose rays hit the plane validly. Result is in the plane basis.
    """
    cfg = cfg or ExtentConfig()
    if polygon.is_empty:
        raise FullyInvalidError(f"empty polygon for plane {plane.element_id}")
    minx, miny, maxx, maxy = polygon.bounds
    region = _valid_region((minx - 1, miny - 1, maxx + 1, maxy + 1), plane, camera, cfg.horizon_margin)
    if region is None:
        raise FullyInvalidError(f"polygon lies entirely beyond the horizon of plane {plane.element_id}")
    clipped = polygonal(polygon.intersection(region))
    if clipped.is_empty or clipped.area <= 0:
        raise FullyInvalidError(f"polygon lies entirely beyond the horizon of plane {plane.element_id}")

    basis = PlaneBasis.for_plane(plane)
    origin = camera.center

    def to_plane(px: np.ndarray) -> np.ndarray:
        homog = np.column_stack([px, np.ones(len(px))])
        dirs = (homog @ camera.intrinsics_inv.T) @ camera.rotation
        s = -(origin @ plane.normal + plane.offset) / (dirs @ plane.normal)
        return basis.to_2d(origin + s[:, None] * dirs)

    mapped = map_geometry(clipped, to_plane)
    if mapped.is_empty:
        raise FullyInvalidError(f"polygon unprojects to nothing on plane {plane.element_id}")
    return mapped


def union_extent(
    element_id: int,
    plane: Plane,
    parts: Sequence[BaseGeometry],
    cls: Optional[StructuralClass] = None,
    snap: float = 1e-6,
) -> PlanarPolygonSet:
    """Boolean union of per-frame polygons on one plane (holes preserved)."""
    parts = [p for p in parts if p is not None and not p.is_empty]
    if not parts:
        return PlanarPolygonSet(element_id, plane, MultiPolygon(), cls)
    merged = polygonal(shapely.union_all(parts, grid_size=snap))
    return PlanarPolygonSet(element_id, plane, merged, cls)


@technical_trace
def build_extents(
    frames: Sequence[FrameAnnotation],
    registry: ElementRegistry,
    plane_set,
    cameras: Mapping[int, CameraFrame],
    element_ids: Sequence[int],
    cfg: Optional[ExtentConfig] = None,
) -> Dict[int, PlanarPolygonSet]:
    """Union of unprojected amodal polygons for each listed (non-opening) element."""
    cfg = cfg or ExtentConfig()
    wanted = set(element_ids)
    parts: Dict[int, List[BaseGeometry]] = {gid: [] for gid in element_ids}
    for fa in frames:
        cam = cameras.get(fa.frame_index)
        if cam is None:
            continue
        for elem in fa.elements:
            gid = registry.mapping.get((fa.frame_index, elem.local_id))
            if gid not in wanted:
                continue
            try:
                parts[gid].append(unproject_polygon(elem.amodal, plane_set.planes[gid], cam, cfg))
            except FullyInvalidError:
                continue
    return {
        gid: union_extent(gid, plane_set.planes[gid], parts[gid], registry.classes.get(gid), cfg.snap_tolerance)
        for gid in element_ids
    }


# ----------------------------------------------------------------------------
# Refinement
# ----------------------------------------------------------------------------

def _line_in_basis(basis: PlaneBasis, point: np.ndarray, direction: np.ndarray):
    p2 = basis.to_2d(point)[0]
    d2 = np.array([direction @ basis.u, direction @ basis.v])
    return p2, d2 / np.linalg.norm(d2)


def _long_line(p: np.ndarray, d: np.ndarray, geom: BaseGeometry, extra: float = 0.0) -> LineString:
    minx, miny, maxx, maxy = geom.bounds
    reach = np.hypot(maxx - minx, maxy - miny) + np.linalg.norm(p - [minx, miny]) + extra + 1.0
    return LineString([p - reach * d, p + reach * d])


def _half_plane(p: np.ndarray, d: np.ndarray, geom: BaseGeometry, side: float) -> Polygon:
    minx, miny, maxx, maxy = geom.bounds
    reach = 4.0 * (np.hypot(maxx - minx, maxy - miny) + np.linalg.norm(p - [minx, miny]) + 1.0)
    nrm = side * np.array([-d[1], d[0]])
    a, b = p - reach * d, p + reach * d
    return Polygon([a, b, b + reach * nrm, a + reach * nrm])


def _extend_toward(geom: BaseGeometry, p: np.ndarray, d: np.ndarray, band_factor: float) -> Optional[BaseGeometry]:
    """Snap vertices lying within band_factor x gap of the line onto it."""
    line = _long_line(p, d, geom)
    gap = geom.distance(line)
    if gap <= 0.0:
        return None
    band = band_factor * gap
    nrm = np.array([-d[1], d[0]])

    def snap(coords: np.ndarray) -> np.ndarray:
        rel = coords - p
        off = rel @ nrm
        moved = coords.copy()
        near = np.abs(off) <= band
        moved[near] = p + np.outer(rel[near] @ d, d)
        return moved

    return map_geometry(geom, snap)


def _line_overlap(a: BaseGeometry, b: BaseGeometry, pa: np.ndarray, da: np.ndarray, pb: np.ndarray, db: np.ndarray) -> float:
    """
    Length of the stretch of the shared 3D line covered by both polygons.
    (pa, da) and (pb, db) are the same 3D line in each polygon's basis, so
    parameters measured from pa and pb are comparable.
    """
    def intervals(geom, p, d):
        inter = geom.intersection(_long_line(p, d, geom))
        segs = []
        for part in getattr(inter, "geoms", [inter]):
            if isinstance(part, LineString) and not part.is_empty:
                xy = np.asarray(part.coords)
                t = (xy - p) @ d
                segs.append((t.min(), t.max()))
        return segs

    ia = intervals(a, pa, da)
    ib = intervals(b, pb, db)
    total = 0.0
    for a0, a1 in ia:
        for b0, b1 in ib:
            total += max(0.0, min(a1, b1) - max(a0, b0))
    return total


def _cut_small_side(geom: BaseGeometry, p: np.ndarray, d: np.ndarray, max_cut: float) -> Optional[BaseGeometry]:
    area = geom.area
    if area <= 0:
        return None
    left = polygonal(geom.intersection(_half_plane(p, d, geom, 1.0)))
    right = polygonal(geom.intersection(_half_plane(p, d, geom, -1.0)))
    if left.is_empty or right.is_empty:
        return None
    small, big = (left, right) if left.area <= right.area else (right, left)
    if small.area <= 0 or small.area >= max_cut * area:
        return None
    return big


@technical_trace
def refine(
    extents: Mapping[int, PlanarPolygonSet],
    neighbor_pairs: Sequence[Tuple[int, int]],
    cfg: Optional[ExtentConfig] = None,
    request_id: Optional[str] = None,
) -> Dict[int, PlanarPolygonSet]:
    """
    Extend neighbouring extents to their intersection line, then cut thin
    overshoots past it. Each accepted step changes an area by at most
    max_growth / max_cut of that polygon.
    """
    cfg = cfg or ExtentConfig()
    out = {gid: PlanarPolygonSet(s.element_id, s.plane, s.geometry, s.cls, s.basis) for gid, s in extents.items()}
    extended = rejected = cut = 0

    for i, j in sorted(tuple(sorted(pair)) for pair in neighbor_pairs):
        if i not in out or j not in out or out[i].is_empty or out[j].is_empty:
            continue
        line = plane_intersection_line(out[i].plane, out[j].plane, cfg.parallel_cos)
        if line is None:
            continue
        point, direction = line
        for gid in (i, j):
            s = out[gid]
            p2, d2 = _line_in_basis(s.basis, point, direction)
            grown = _extend_toward(s.geometry, p2, d2, cfg.band_factor)
            if grown is None or grown.is_empty:
                continue
            merged = polygonal(shapely.union_all([s.geometry, grown], grid_size=cfg.snap_tolerance))
            if merged.area <= s.area * (1.0 + cfg.max_growth):
                s.geometry = merged
                extended += 1
            else:
                rejected += 1

        si, sj = out[i], out[j]
        pi_, di_ = _line_in_basis(si.basis, point, direction)
        pj_, dj_ = _line_in_basis(sj.basis, point, direction)
        if _line_overlap(si.geometry, sj.geometry, pi_, di_, pj_, dj_) <= 0:
            continue
        for s, p2, d2 in ((si, pi_, di_), (sj, pj_, dj_)):
            trimmed = _cut_small_side(s.geometry, p2, d2, cfg.max_cut)
            if trimmed is not None:
                s.geometry = trimmed
                cut += 1

    LayoutLogger().log_stage(
        request_id or "refine",
        "refine_applied",
        counts={"pairs": len(neighbor_pairs), "extended": extended, "rejected": rejected, "cut": cut},
    )
    return out


# ----------------------------------------------------------------------------
# Doors and windows
# ----------------------------------------------------------------------------

def find_hosts(
    frames: Sequence[FrameAnnotation],
    registry: ElementRegistry,
    request_id: Optional[str] = None,
) -> Tuple[Dict[int, int], List[int]]:
    """
    Host of every door/window: the non-opening element sharing the longest
    amodal border with it, summed over frames (ties -> lowest id).

    Returns:
        (hosts {opening id: host id}, opening ids without a host)
    """
    shared: Dict[int, Dict[int, float]] = {}
    for fa in frames:
        for door in fa.elements:
            if not door.cls.is_opening:
                continue
            did = registry.mapping.get((fa.frame_index, door.local_id))
            if did is None:
                continue
            lengths = shared.setdefault(did, {})
            border = door.amodal.boundary
            for other in fa.elements:
                if other.cls.is_opening:
                    continue
                oid = registry.mapping.get((fa.frame_index, other.local_id))
                if oid is None:
                    continue
                length = border.intersection(other.amodal.buffer(1.0)).length
                if length > 0:
                    lengths[oid] = lengths.get(oid, 0.0) + length

    hosts: Dict[int, int] = {}
    orphans: List[int] = []
    logger = LayoutLogger()
    for did in sorted(shared):
        lengths = shared[did]
        if not lengths:
            orphans.append(did)
            logger.log_warning(
                request_id or "hosts",
                str(NoHostError(did)),
                event_type="door_window_no_host",
                context={"element_id": did},
            )
            continue
        best = max(lengths.values())
        hosts[did] = min(gid for gid, length in lengths.items() if length == best)
    return hosts, orphans


@technical_trace
def attach_doors_windows(
    extents: Mapping[int, PlanarPolygonSet],
    frames: Sequence[FrameAnnotation],
    registry: ElementRegistry,
    hosts: Mapping[int, int],
    cameras: Mapping[int, CameraFrame],
    cfg: Optional[ExtentConfig] = None,
) -> Tuple[Dict[int, PlanarPolygonSet], Dict[int, PlanarPolygonSet]]:
    """
    Unproject each door/window onto its host plane, add it to the host's
    extent and return it as its own polygon set too.
    """
    cfg = cfg or ExtentConfig()
    parts: Dict[int, List[BaseGeometry]] = {}
    for fa in frames:
        cam = cameras.get(fa.frame_index)
        if cam is None:
            continue
        for elem in fa.elements:
            if not elem.cls.is_opening:
                continue
            did = registry.mapping.get((fa.frame_index, elem.local_id))
            host = hosts.get(did)
            if host is None or host not in extents:
                continue
            try:
                parts.setdefault(did, []).append(unproject_polygon(elem.amodal, extents[host].plane, cam, cfg))
            except FullyInvalidError:
                continue

    updated = {gid: PlanarPolygonSet(s.element_id, s.plane, s.geometry, s.cls, s.basis) for gid, s in extents.items()}
    openings: Dict[int, PlanarPolygonSet] = {}
    for did in sorted(parts):
        host = updated[hosts[did]]
        opening = union_extent(did, host.plane, parts[did], registry.classes.get(did), cfg.snap_tolerance)
        if opening.is_empty:
            continue
        openings[did] = opening
        host.geometry = polygonal(shapely.union_all([host.geometry, opening.geometry], grid_size=cfg.snap_tolerance))
    return updated, openings


# ----------------------------------------------------------------------------
# Triangulation
# ----------------------------------------------------------------------------

def _triangulate_geometry(geom: BaseGeometry, element_id: int) -> np.ndarray:
    """(F, 3, 2) triangles covering geom exactly."""
    tris = []
    polys = [geom] if isinstance(geom, Polygon) else list(getattr(geom, "geoms", []))
    for poly in polys:
        if not isinstance(poly, Polygon) or poly.is_empty:
            continue
        try:
            coll = shapely.constrained_delaunay_triangles(poly)
        except shapely.errors.GEOSException as e:
            raise TriangulationError(str(e), element_id=element_id) from e
        for tri in coll.geoms:
            tris.append(np.asarray(tri.exterior.coords)[:3])
    if not tris:
        return np.zeros((0, 3, 2))
    return np.array(tris)


@technical_trace
def triangulate(
    extents: Mapping[int, PlanarPolygonSet],
    openings: Optional[Mapping[int, PlanarPolygonSet]] = None,
    hosts: Optional[Mapping[int, int]] = None,
    skip_failures: bool = False,
) -> Tuple[LayoutMesh, List[int]]:
    """
    Triangulate every extent into one labeled mesh.

    Door/window areas are cut out of their host's polygon so each face has
    exactly one label. Returns the mesh and the ids that failed (only when
    skip_failures is set; otherwise the first failure raises).
    """
    openings = dict(openings or {})
    hosts = dict(hosts or {})
    items: List[Tuple[int, PlanarPolygonSet, BaseGeometry]] = []
    for gid in sorted(extents):
        s = extents[gid]
        geom = s.geometry
        own = [openings[d].geometry for d in sorted(openings) if hosts.get(d) == gid]
        if own and not geom.is_empty:
            geom = polygonal(geom.difference(shapely.union_all(own)))
        items.append((gid, s, geom))
    for did in sorted(openings):
        items.append((did, openings[did], openings[did].geometry))
    items.sort(key=lambda item: item[0])

    vertices, triangles, element_ids, class_ids = [], [], [], []
    failed: List[int] = []
    base = 0
    for gid, s, geom in items:
        if geom.is_empty:
            continue
        try:
            tri2d = _triangulate_geometry(geom, gid)
            a, b, c = tri2d[:, 0], tri2d[:, 1], tri2d[:, 2]
            areas = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
            tri2d = tri2d[areas > _MIN_TRIANGLE_AREA]
            total = float(areas[areas > _MIN_TRIANGLE_AREA].sum())
            if geom.area > 0 and abs(total - geom.area) > 1e-6 * geom.area:
                raise TriangulationError(
                    f"triangle area {total:.9g} != polygon area {geom.area:.9g}", element_id=gid
                )
        except TriangulationError:
            if not skip_failures:
                raise
            failed.append(gid)
            continue
        if len(tri2d) == 0:
            continue
        pts3d = s.basis.to_3d(tri2d.reshape(-1, 2))
        # Snap onto the plane to remove basis rounding.
        pts3d -= np.outer(pts3d @ s.plane.normal + s.plane.offset, s.plane.normal)
        n = len(tri2d)
        vertices.append(pts3d)
        triangles.append(base + np.arange(3 * n).reshape(n, 3))
        element_ids.append(np.full(n, gid))
        class_ids.append(np.full(n, s.cls.class_id if s.cls is not None else -1))
        base += 3 * n

    if not vertices:
        return LayoutMesh.empty(), failed
    return (
        LayoutMesh(
            vertices=np.vstack(vertices),
            triangles=np.vstack(triangles).astype(np.int64),
            element_ids=np.concatenate(element_ids).astype(np.int64),
            class_ids=np.concatenate(class_ids).astype(np.int64),
        ),
        failed,
    )
