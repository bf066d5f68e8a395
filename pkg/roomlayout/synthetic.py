"""
Synthetic - Ground-truth rooms for end-to-end checks.

A preset is a list of planar surfaces (floor, ceiling, walls, slanted
pieces) with optional doors/windows on them and open cut-outs (doorways).
From it we derive, per camera:

- amodal annotations: each surface's projection minus whatever nearer
  surface covers it (an inverse-depth half-plane test per surface pair),
- occlusion edges: stretches of an element's outline where a clearly nearer
  surface ends,
- visible parts: amodal minus random "furniture" rectangles,
- exact point motion (OracleTrackSource) and ground-truth depth maps.

Annotation jitter is a smooth per-frame displacement field applied to every
vertex, so neighbouring polygons keep tiling.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LineString, MultiPolygon, Polygon
from shapely.geometry.base import BaseGeometry

from roomlayout.annotations import StructuralClass, geometry_to_rings, parse_annotations, polygonal
from roomlayout.config.models import SamplerConfig, SyntheticConfig
from roomlayout.evaluation import NEAR_PLANE, rasterize
from roomlayout.exceptions import InfeasiblePresetError, TrackingError
from roomlayout.extent import LayoutMesh, PlanarPolygonSet, map_geometry, triangulate
from roomlayout.geometry import CameraFrame, Plane, look_at_rotation, pixel_directions, project_many
from roomlayout.scene_io import SceneBundle
from roomlayout.solver import PlaneSet
from roomlayout.track_sources import OracleTrackSource
from roomlayout.tracking import ElementRegistry, PointTrack, Sample, build_tracks, sample_points
from utils.logger import LayoutLogger

ROOM_HEIGHT = 2.7
PRESETS = ("cuboid", "manhattan", "generic", "composite")
# An element counts as seen in a frame above this fraction of the image area.
MIN_SEEN_FRACTION = 0.005
# Nearer surface must be this much closer (relative inverse depth) to occlude.
_OCCLUSION_MARGIN = 1e-3
_MIN_BASELINE_RATIO = 0.05
_MAX_NOISE_FRACTION = 0.05

_FLOOR, _CEILING, _WALL, _SLANTED = (
    StructuralClass.FLOOR,
    StructuralClass.CEILING,
    StructuralClass.WALL,
    StructuralClass.SLANTED,
)


@dataclass(frozen=True)
class _SurfaceSpec:
    cls: StructuralClass
    outline: Tuple[Tuple[float, float, float], ...]
    cutouts: Tuple[Tuple[Tuple[float, float, float], ...], ...] = ()
    openings: Tuple[Tuple[StructuralClass, Tuple[Tuple[float, float, float], ...]], ...] = ()


# ----------------------------------------------------------------------------
# Presets
# ----------------------------------------------------------------------------

def _flat(cls, xy, z):
    return _SurfaceSpec(cls, tuple((x, y, z) for x, y in xy))


def _wall(p0, p1, z0=0.0, z1=ROOM_HEIGHT, **kw):
    (x0, y0), (x1, y1) = p0, p1
    return _SurfaceSpec(_WALL, ((x0, y0, z0), (x1, y1, z0), (x1, y1, z1), (x0, y0, z1)), **kw)


def _rect_x(x0, x1, y, z0, z1):
    """Vertical rectangle in the plane y = const."""
    return ((x0, y, z0), (x1, y, z0), (x1, y, z1), (x0, y, z1))


def _rect_y(x, y0, y1, z0, z1):
    """Vertical rectangle in the plane x = const."""
    return ((x, y0, z0), (x, y1, z0), (x, y1, z1), (x, y0, z1))


def _cuboid() -> List[_SurfaceSpec]:
    x0, x1, y0, y1 = -2.0, 2.0, -2.5, 2.5
    box = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    return [
        _flat(_FLOOR, box, 0.0),
        _flat(_CEILING, box, ROOM_HEIGHT),
        _wall((x0, y1), (x1, y1), openings=((StructuralClass.WINDOW, _rect_x(-0.8, 0.8, y1, 1.0, 2.0)),)),
        _wall((x1, y0), (x1, y1), openings=((StructuralClass.DOOR, _rect_y(x1, 0.2, 1.1, 0.0, 2.1)),)),
        _wall((x0, y0), (x0, y1)),
        _wall((x0, y0), (x1, y0)),
    ]


def _manhattan() -> List[_SurfaceSpec]:
    outline = [(-2.0, -2.5), (2.0, -2.5), (2.0, 0.5), (4.5, 0.5), (4.5, 2.5), (-2.0, 2.5)]
    walls = []
    for a, b in zip(outline, outline[1:] + outline[:1]):
        walls.append(_wall(a, b))
    # door on the left wall (x = -2)
    walls[-1] = _wall(outline[-1], outline[0], openings=((StructuralClass.DOOR, _rect_y(-2.0, -0.4, 0.5, 0.0, 2.1)),))
    return [_flat(_FLOOR, outline, 0.0), _flat(_CEILING, outline, ROOM_HEIGHT), *walls]


def _generic() -> List[_SurfaceSpec]:
    low, knee = 2.2, -0.8
    return [
        _flat(_FLOOR, [(-2.0, -2.5), (2.0, -2.5), (2.8, 2.5), (-2.0, 2.5)], 0.0),
        _flat(_CEILING, [(knee, -2.5), (2.0, -2.5), (2.8, 2.5), (knee, 2.5)], ROOM_HEIGHT),
        _SurfaceSpec(_SLANTED, ((-2.0, -2.5, low), (knee, -2.5, ROOM_HEIGHT), (knee, 2.5, ROOM_HEIGHT), (-2.0, 2.5, low))),
        _SurfaceSpec(
            _WALL,
            ((-2.0, 2.5, 0.0), (2.8, 2.5, 0.0), (2.8, 2.5, ROOM_HEIGHT), (knee, 2.5, ROOM_HEIGHT), (-2.0, 2.5, low)),
            openings=((StructuralClass.WINDOW, _rect_x(0.2, 1.6, 2.5, 0.9, 1.9)),),
        ),
        _wall((2.0, -2.5), (2.8, 2.5)),
        _wall((-2.0, -2.5), (-2.0, 2.5), z1=low),
        _SurfaceSpec(_WALL, ((-2.0, -2.5, 0.0), (2.0, -2.5, 0.0), (2.0, -2.5, ROOM_HEIGHT), (knee, -2.5, ROOM_HEIGHT), (-2.0, -2.5, low))),
    ]


def _composite() -> List[_SurfaceSpec]:
    x0, x1, ya, ym, yb = -2.0, 2.0, -2.5, 1.5, 5.5
    room_a = [(x0, ya), (x1, ya), (x1, ym), (x0, ym)]
    room_b = [(x0, ym), (x1, ym), (x1, yb), (x0, yb)]
    return [
        _flat(_FLOOR, room_a, 0.0),
        _flat(_CEILING, room_a, ROOM_HEIGHT),
        _wall((x0, ya), (x0, ym)),
        _wall((x1, ya), (x1, ym)),
        _wall((x0, ya), (x1, ya)),
        _wall((x0, ym), (x1, ym), cutouts=(_rect_x(-1.0, 1.0, ym, -0.01, 2.1),)),
        _flat(_FLOOR, room_b, 0.0),
        _flat(_CEILING, room_b, ROOM_HEIGHT),
        _wall((x0, ym), (x0, yb)),
        _wall((x1, ym), (x1, yb)),
        _wall((x0, yb), (x1, yb), openings=((StructuralClass.WINDOW, _rect_x(-0.7, 0.7, yb, 1.0, 2.0)),)),
    ]


_PRESET_BUILDERS = {
    "cuboid": (_cuboid, (0.0, -1.2, 1.5)),
    "manhattan": (_manhattan, (0.0, -1.2, 1.5)),
    "generic": (_generic, (0.2, -1.2, 1.4)),
    "composite": (_composite, (0.0, -1.5, 1.5)),
}


def _plane_through(points: np.ndarray, element_id: int) -> Plane:
    """Newell normal of a planar polygon."""
    n = np.zeros(3)
    for a, b in zip(points, np.roll(points, -1, axis=0)):
        n += np.cross(a, b)
    n = n / np.linalg.norm(n)
    return Plane(normal=n, offset=-float(n @ points.mean(axis=0)), element_id=element_id)


def _build_surfaces(specs: Sequence[_SurfaceSpec]) -> Tuple[Dict[int, PlanarPolygonSet], Dict[int, int]]:
    surfaces: Dict[int, PlanarPolygonSet] = {}
    hosts: Dict[int, int] = {}
    next_id = 0
    for spec in specs:
        outline = np.array(spec.outline, dtype=np.float64)
        gid = next_id
        next_id += 1
        plane = _plane_through(outline, gid)
        host = PlanarPolygonSet(gid, plane, MultiPolygon(), spec.cls)
        geom = Polygon(host.basis.to_2d(outline))
        for cut in spec.cutouts:
            geom = geom.difference(Polygon(host.basis.to_2d(np.array(cut))))
        host.geometry = polygonal(geom)
        surfaces[gid] = host
        for cls, rect in spec.openings:
            oid = next_id
            next_id += 1
            shape = polygonal(Polygon(host.basis.to_2d(np.array(rect))).intersection(host.geometry))
            surfaces[oid] = PlanarPolygonSet(oid, plane, shape, cls, host.basis)
            hosts[oid] = gid
    return surfaces, hosts


# ----------------------------------------------------------------------------
# Scene
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class SyntheticScene:
    preset: str
    surfaces: Dict[int, PlanarPolygonSet]
    hosts: Dict[int, int]
    cameras: List[CameraFrame]
    image_size: Tuple[int, int]
    seed: int = 0
    track_noise_px: float = 0.0
    occlusion_dropout: float = 0.0
    registry: ElementRegistry = field(default_factory=ElementRegistry)

    def __post_init__(self):
        self._tiled = self._tile()

    def _tile(self) -> Dict[int, BaseGeometry]:
        """Surface geometry with every door/window cut out of its host."""
        tiled = {}
        for gid in sorted(self.surfaces):
            geom = self.surfaces[gid].geometry
            own = [self.surfaces[o].geometry for o, h in sorted(self.hosts.items()) if h == gid]
            if own:
                geom = polygonal(geom.difference(shapely.union_all(own)))
            tiled[gid] = geom
        return tiled

    @property
    def extents(self) -> Dict[int, PlanarPolygonSet]:
        return {g: s for g, s in self.surfaces.items() if not s.cls.is_opening}

    @property
    def openings(self) -> Dict[int, PlanarPolygonSet]:
        return {g: s for g, s in self.surfaces.items() if s.cls.is_opening}

    @property
    def plane_set(self) -> PlaneSet:
        return PlaneSet(
            planes={g: s.plane for g, s in self.extents.items()},
            classes={g: s.cls for g, s in self.surfaces.items()},
            hosts=dict(self.hosts),
        )

    def camera_map(self) -> Dict[int, CameraFrame]:
        return {c.frame_index: c for c in self.cameras}

    def mesh(self) -> LayoutMesh:
        mesh, _ = triangulate(self.extents, self.openings, self.hosts)
        return mesh

    def raycast(self, camera: CameraFrame, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        First surface hit by the ray through each pixel.

        Returns:
            (element ids, -1 for a miss; distance along the unit ray, NaN for a miss)
        """
        dirs = pixel_directions(camera, np.atleast_2d(pixels))
        centre = camera.center
        best = np.full(len(dirs), np.inf)
        ids = np.full(len(dirs), -1, dtype=np.int64)
        for gid, geom in self._tiled.items():
            if geom.is_empty:
                continue
            s_set = self.surfaces[gid]
            n, e = s_set.plane.normal, s_set.plane.offset
            with np.errstate(divide="ignore", invalid="ignore"):
                s = -(centre @ n + e) / (dirs @ n)
            idx = np.flatnonzero(np.isfinite(s) & (s > 0) & (s < best))
            if len(idx) == 0:
                continue
            uv = s_set.basis.to_2d(centre + s[idx, None] * dirs[idx])
            hit = idx[shapely.intersects_xy(geom, uv[:, 0], uv[:, 1])]
            best[hit] = s[hit]
            ids[hit] = gid
        return ids, np.where(ids >= 0, best, np.nan)

    # ------------------------------------------------------------------
    # Serialisation (ground_truth.json)
    # ------------------------------------------------------------------

    def to_record(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "image_size": list(self.image_size),
            "noise": {
                "track_noise_px": self.track_noise_px,
                "occlusion_dropout": self.occlusion_dropout,
            },
            "elements": [
                {
                    "element_id": gid,
                    "class": s.cls.value,
                    "host": self.hosts.get(gid),
                    "normal": [float(v) for v in s.plane.normal],
                    "offset": float(s.plane.offset),
                    "extent_wkt": shapely.to_wkt(s.geometry, rounding_precision=9),
                }
                for gid, s in sorted(self.surfaces.items())
            ],
            "registry": self.registry.to_records(),
        }

    @classmethod
    def from_record(cls, record: dict, cameras: Mapping[int, CameraFrame]) -> "SyntheticScene":
        surfaces: Dict[int, PlanarPolygonSet] = {}
        hosts: Dict[int, int] = {}
        for e in record["elements"]:
            gid = int(e["element_id"])
            plane = Plane(normal=e["normal"], offset=e["offset"], element_id=gid)
            surfaces[gid] = PlanarPolygonSet(gid, plane, shapely.from_wkt(e["extent_wkt"]), StructuralClass(e["class"]))
            if e.get("host") is not None:
                hosts[gid] = int(e["host"])
        noise = record.get("noise", {})
        return cls(
            preset=record["preset"],
            surfaces=surfaces,
            hosts=hosts,
            cameras=[cameras[k] for k in sorted(cameras)],
            image_size=tuple(record["image_size"]),
            seed=int(record.get("seed", 0)),
            track_noise_px=float(noise.get("track_noise_px", 0.0)),
            occlusion_dropout=float(noise.get("occlusion_dropout", 0.0)),
            registry=ElementRegistry.from_records(record["registry"]),
        )


# ----------------------------------------------------------------------------
# Cameras
# ----------------------------------------------------------------------------

def _trajectory(cfg: SyntheticConfig, start: Sequence[float]) -> List[CameraFrame]:
    """Sideways walk while panning 150 degrees, with a gentle pitch sway."""
    K = np.array([
        [cfg.focal_px, 0.0, (cfg.width - 1) / 2.0],
        [0.0, cfg.focal_px, (cfg.height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    cameras = []
    for k in range(cfg.frames):
        t = k / (cfg.frames - 1)
        centre = np.asarray(start, dtype=np.float64) + np.array(
            [0.8 * (t - 0.5), 0.25 * math.sin(math.pi * t), 0.1 * math.sin(2 * math.pi * t)]
        )
        yaw = math.radians(-75.0 + 150.0 * t)
        pitch = math.radians(10.0) * math.sin(2 * math.pi * t)
        forward = (math.sin(yaw) * math.cos(pitch), math.cos(yaw) * math.cos(pitch), math.sin(pitch))
        R = look_at_rotation(forward)
        cameras.append(
            CameraFrame(
                frame_index=k,
                intrinsics=K,
                rotation=R,
                translation=-R @ centre,
                annotated=k % cfg.annotate_every == 0,
            )
        )
    return cameras


# ----------------------------------------------------------------------------
# Annotation geometry
# ----------------------------------------------------------------------------

def _half_plane(bounds, coef) -> Optional[Polygon]:
    """{p in bounds : a x + b y + c >= 0} as a polygon, or None."""
    a, b, c = coef
    minx, miny, maxx, maxy = bounds
    corners = np.array([[minx, miny], [maxx, miny], [maxx, maxy], [minx, maxy]])
    vals = corners @ np.array([a, b]) + c
    out = []
    for i in range(4):
        j = (i + 1) % 4
        if vals[i] >= 0:
            out.append(corners[i])
        if (vals[i] >= 0) != (vals[j] >= 0):
            t = vals[i] / (vals[i] - vals[j])
            out.append(corners[i] + t * (corners[j] - corners[i]))
    if len(out) < 3:
        return None
    poly = Polygon(out)
    return poly if poly.area > 0 else None


def _image_box(size: Tuple[int, int]) -> Polygon:
    return shapely.box(-0.5, -0.5, size[0] - 0.5, size[1] - 0.5)


def _project_surface(s_set: PlanarPolygonSet, geom: BaseGeometry, camera: CameraFrame, box: Polygon) -> BaseGeometry:
    """Image region covered by a planar surface, clipped to the near plane and the image."""
    if geom.is_empty:
        return MultiPolygon()
    basis = s_set.basis
    r2 = camera.rotation[2]
    z0 = float(r2 @ basis.origin + camera.translation[2])
    minx, miny, maxx, maxy = geom.bounds
    front = _half_plane((minx - 1, miny - 1, maxx + 1, maxy + 1), (r2 @ basis.u, r2 @ basis.v, z0 - NEAR_PLANE))
    if front is None:
        return MultiPolygon()
    clipped = polygonal(geom.intersection(front))
    if clipped.is_empty:
        return MultiPolygon()

    def to_image(uv: np.ndarray) -> np.ndarray:
        pix, _ = project_many(camera, basis.to_3d(uv))
        return pix

    return polygonal(map_geometry(clipped, to_image).intersection(box))


def _inverse_depth(s_set: PlanarPolygonSet, camera: CameraFrame) -> np.ndarray:
    """Coefficients q with 1/s(p) = q . [x, y, 1] along the unnormalised pixel ray."""
    h = float(s_set.plane.normal @ camera.center + s_set.plane.offset)
    abc = camera.intrinsics_inv.T @ (camera.rotation @ s_set.plane.normal)
    return -abc / h


@dataclass
class _FrameGeometry:
    projected: Dict[int, BaseGeometry]
    amodal: Dict[int, BaseGeometry]
    inv_depth: Dict[int, np.ndarray]


def _frame_geometry(scene: SyntheticScene, camera: CameraFrame, active: Sequence[int]) -> _FrameGeometry:
    box = _image_box(scene.image_size)
    projected, inv = {}, {}
    for gid in active:
        region = _project_surface(scene.surfaces[gid], scene._tiled[gid], camera, box)
        if region.is_empty or region.area <= 0:
            continue
        projected[gid] = region
        inv[gid] = _inverse_depth(scene.surfaces[gid], camera)

    amodal = {}
    bounds = box.bounds
    for i, region in projected.items():
        covers = []
        for j, other in projected.items():
            if j == i or not region.intersects(other):
                continue
            coef = inv[j] - inv[i]
            if np.linalg.norm(coef) <= 1e-9 * (np.linalg.norm(inv[i]) + np.linalg.norm(inv[j])):
                continue
            nearer = _half_plane(bounds, coef)
            if nearer is not None:
                covers.append(other.intersection(nearer))
        shown = polygonal(region.difference(shapely.union_all(covers))) if covers else region
        if not shown.is_empty and shown.area >= 1.0:
            amodal[i] = shown
    return _FrameGeometry(projected, amodal, inv)


def _flag_runs(flags: np.ndarray) -> List[np.ndarray]:
    """Index arrays of consecutive True samples on a closed ring."""
    n = len(flags)
    if n == 0 or not flags.any():
        return []
    if flags.all():
        return [np.arange(n)]
    shift = int(np.argmin(flags))
    order = (np.arange(n) + shift) % n
    rolled = flags[order]
    runs, current = [], []
    for k, flag in enumerate(rolled):
        if flag:
            current.append(order[k])
        elif current:
            runs.append(np.array(current))
            current = []
    if current:
        runs.append(np.array(current))
    return runs


def _occlusion_edges(fg: _FrameGeometry, size: Tuple[int, int], step: float = 1.0) -> List[np.ndarray]:
    """Outline stretches of each element where a clearly nearer surface ends."""
    box_edge = _image_box(size).exterior
    edges = []
    for i, geom in sorted(fg.amodal.items()):
        polys = [geom] if isinstance(geom, Polygon) else list(geom.geoms)
        for poly in polys:
            for ring in [poly.exterior, *poly.interiors]:
                line = LineString(ring.coords)
                if line.length < 2 * step:
                    continue
                pts = shapely.line_interpolate_point(line, np.arange(0.0, line.length, step))
                xy = shapely.get_coordinates(pts)
                homog = np.column_stack([xy, np.ones(len(xy))])
                inv_i = homog @ fg.inv_depth[i]
                flags = np.zeros(len(xy), dtype=bool)
                for j, other in fg.projected.items():
                    if j == i:
                        continue
                    near_j = shapely.distance(other, pts) < 0.5
                    in_front = homog @ fg.inv_depth[j] - inv_i > _OCCLUSION_MARGIN * np.abs(inv_i)
                    flags |= near_j & in_front
                flags &= shapely.distance(box_edge, pts) > 0.5
                for run in _flag_runs(flags):
                    if len(run) >= 3:
                        edges.append(xy[run])
    return edges


def _jitter_field(cfg: SyntheticConfig, frame_index: int):
    if cfg.annotation_jitter_px <= 0:
        return None
    rng = np.random.default_rng((cfg.seed, frame_index, 11))
    scale = 2 * math.pi / max(cfg.width, cfg.height)
    k = rng.uniform(0.5, 1.5, size=(2, 2)) * scale
    phase = rng.uniform(0.0, 2 * math.pi, size=(2, 2))
    amp = cfg.annotation_jitter_px

    def apply(coords: np.ndarray) -> np.ndarray:
        x, y = coords[:, 0], coords[:, 1]
        dx = 0.5 * amp * (np.sin(k[0, 0] * x + phase[0, 0]) + np.sin(k[0, 1] * y + phase[0, 1]))
        dy = 0.5 * amp * (np.sin(k[1, 0] * x + phase[1, 0]) + np.sin(k[1, 1] * y + phase[1, 1]))
        return np.column_stack([x + dx, y + dy])

    return apply


def _furniture(cfg: SyntheticConfig, frame_index: int) -> Optional[BaseGeometry]:
    if cfg.furniture == 0:
        return None
    rng = np.random.default_rng((cfg.seed, frame_index, 13))
    rects = []
    for _ in range(cfg.furniture):
        w = rng.uniform(0.10, 0.25) * cfg.width
        h = rng.uniform(0.10, 0.30) * cfg.height
        x = rng.uniform(0.0, cfg.width - w)
        y = rng.uniform(0.5 * cfg.height, cfg.height - h)
        rects.append(shapely.box(x, y, x + w, y + h))
    return shapely.union_all(rects)


def _frame_record(
    scene: SyntheticScene,
    camera: CameraFrame,
    active: Sequence[int],
    cfg: SyntheticConfig,
) -> Tuple[dict, Dict[int, int]]:
    """Annotation record of one frame plus its local -> global id map."""
    fg = _frame_geometry(scene, camera, active)
    edges = _occlusion_edges(fg, scene.image_size)
    jitter = _jitter_field(cfg, camera.frame_index)
    furniture = _furniture(cfg, camera.frame_index)

    rng = np.random.default_rng((cfg.seed, camera.frame_index, 17))
    gids = sorted(fg.amodal)
    local_ids = (rng.permutation(len(gids)) + 1).tolist()

    elements = []
    local_to_global = {}
    for gid, lid in zip(gids, local_ids):
        amodal = fg.amodal[gid]
        if jitter is not None:
            amodal = polygonal(shapely.make_valid(shapely.transform(shapely.segmentize(amodal, 4.0), jitter)))
        visible = polygonal(amodal.difference(furniture)) if furniture is not None else amodal
        elements.append({
            "local_id": lid,
            "class": scene.surfaces[gid].cls.value,
            "amodal": geometry_to_rings(amodal),
            "visible": geometry_to_rings(visible),
        })
        local_to_global[lid] = gid
    elements.sort(key=lambda e: e["local_id"])

    polylines = []
    for line in edges:
        if jitter is not None:
            line = jitter(line)
        polylines.append([[round(float(x), 6), round(float(y), 6)] for x, y in line])

    record = {
        "frame_index": camera.frame_index,
        "width": scene.image_size[0],
        "height": scene.image_size[1],
        "elements": elements,
        "occlusion_edges": polylines,
    }
    return record, local_to_global


def _seen_counts(scene: SyntheticScene, annotated: Sequence[CameraFrame], active: Sequence[int]) -> Dict[int, int]:
    threshold = MIN_SEEN_FRACTION * scene.image_size[0] * scene.image_size[1]
    counts = {gid: 0 for gid in active}
    for cam in annotated:
        for gid, geom in _frame_geometry(scene, cam, active).amodal.items():
            if geom.area >= threshold:
                counts[gid] += 1
    return counts


# ----------------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------------

def _check_feasible(cfg: SyntheticConfig) -> None:
    if cfg.preset not in PRESETS:
        raise InfeasiblePresetError(f"unknown preset '{cfg.preset}' (expected one of {PRESETS})")
    limit = _MAX_NOISE_FRACTION * min(cfg.width, cfg.height)
    if cfg.track_noise_px > limit or cfg.annotation_jitter_px > limit:
        raise InfeasiblePresetError(
            f"noise above {limit:.1f} px swamps a {cfg.width}x{cfg.height} image"
        )
    if len(range(0, cfg.frames, cfg.annotate_every)) < 2:
        raise InfeasiblePresetError(
            f"{cfg.frames} frames with annotate_every={cfg.annotate_every} give fewer than 2 annotated frames"
        )


def generate(cfg: Optional[SyntheticConfig] = None, request_id: Optional[str] = None) -> Tuple[SceneBundle, SyntheticScene]:
    """
    Build a synthetic scene and its bundle (cameras, annotations, depth maps,
    ground truth). Elements seen in fewer than two annotated frames are
    removed from the scene before annotating.
    """
    cfg = cfg or SyntheticConfig()
    _check_feasible(cfg)
    logger = LayoutLogger()
    request_id = request_id or logger.generate_request_id()

    builder, start = _PRESET_BUILDERS[cfg.preset]
    surfaces, hosts = _build_surfaces(builder())
    cameras = _trajectory(cfg, start)
    annotated = [c for c in cameras if c.annotated]
    scene = SyntheticScene(
        preset=cfg.preset,
        surfaces=surfaces,
        hosts=hosts,
        cameras=cameras,
        image_size=(cfg.width, cfg.height),
        seed=cfg.seed,
        track_noise_px=cfg.track_noise_px,
        occlusion_dropout=cfg.occlusion_dropout,
    )

    active = sorted(surfaces)
    for _ in range(4):
        counts = _seen_counts(scene, annotated, active)
        dropped = {gid for gid, n in counts.items() if n < 2}
        dropped |= {o for o, h in hosts.items() if h in dropped}
        if not dropped:
            break
        active = [gid for gid in active if gid not in dropped]
    if sum(1 for gid in active if not surfaces[gid].cls.is_opening) < 3:
        raise InfeasiblePresetError(f"preset '{cfg.preset}' leaves fewer than 3 elements in view")

    kept = set(active)
    scene = SyntheticScene(
        preset=cfg.preset,
        surfaces={g: s for g, s in surfaces.items() if g in kept},
        hosts={o: h for o, h in hosts.items() if o in kept},
        cameras=cameras,
        image_size=(cfg.width, cfg.height),
        seed=cfg.seed,
        track_noise_px=cfg.track_noise_px,
        occlusion_dropout=cfg.occlusion_dropout,
    )

    records = []
    for cam in annotated:
        record, local_to_global = _frame_record(scene, cam, active, cfg)
        records.append(record)
        for lid, gid in local_to_global.items():
            scene.registry.mapping[(cam.frame_index, lid)] = gid
            scene.registry.classes[gid] = scene.surfaces[gid].cls
    frames = list(parse_annotations(records, request_id=request_id))

    mesh = scene.mesh()
    depth = {cam.frame_index: rasterize(mesh, cam, scene.image_size).depth for cam in annotated}
    finite = np.concatenate([d[np.isfinite(d)] for d in depth.values()])
    if finite.size == 0:
        raise InfeasiblePresetError("no annotated frame sees any surface")
    centres = np.array([c.center for c in cameras])
    baseline = float(np.max(np.linalg.norm(centres[:, None] - centres[None], axis=2)))
    mean_depth = float(finite.mean())
    if baseline < _MIN_BASELINE_RATIO * mean_depth:
        raise InfeasiblePresetError(
            f"camera baseline {baseline:.3f} m is under {_MIN_BASELINE_RATIO:.0%} of mean depth {mean_depth:.2f} m"
        )

    bundle = SceneBundle(
        scene_id=f"{cfg.preset}_{cfg.seed}",
        cameras=scene.camera_map(),
        frames=frames,
        depth=depth,
        ground_truth=scene.to_record(),
        oracle=scene,
    )
    logger.log_stage(
        request_id,
        "synthetic_generated",
        counts={
            "preset": cfg.preset,
            "elements": len(scene.surfaces),
            "frames": len(cameras),
            "annotated_frames": len(annotated),
            "baseline_m": baseline,
            "mean_depth_m": mean_depth,
        },
    )
    return bundle, scene


def oracle_tracks(scene: SyntheticScene, samples: Mapping[int, Sequence[Sample]]) -> List[PointTrack]:
    """Exact (optionally noisy) tracks of the given samples through every frame."""
    source = OracleTrackSource(scene, scene.track_noise_px, scene.seed, scene.occlusion_dropout)
    return build_tracks(samples, source, scene.image_size)


def export_tracks(bundle: SceneBundle, scene: SyntheticScene, spacing: float = 15.0) -> Dict[int, Dict[int, np.ndarray]]:
    """Dense oracle tracks from every annotated frame, in tracks.json shape."""
    cfg = SamplerConfig(target_spacing=spacing, seed=scene.seed)
    samples = {}
    for fa in bundle.frames:
        try:
            samples[fa.frame_index] = sample_points(fa, cfg)
        except TrackingError:
            continue
    return {t.track_id: dict(t.points) for t in oracle_tracks(scene, samples)}
