"""
Test suite for plane extents, refinement, openings and triangulation.
"""

import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

from roomlayout.annotations import StructuralClass
from roomlayout.exceptions import FullyInvalidError
from roomlayout.extent import (
    PlanarPolygonSet,
    PlaneBasis,
    attach_doors_windows,
    build_extents,
    find_hosts,
    refine,
    triangulate,
    union_extent,
    unproject_polygon,
)
from roomlayout.geometry import Plane
from roomlayout.solver import PlaneSet
from roomlayout.tracking import match_elements
from utils.tests.scenes import frame_record, make_camera, parse_frames

WALL_PLANE = Plane(normal=(0.0, -1.0, 0.0), offset=5.0, element_id=0)
FLOOR_PLANE = Plane(normal=(0.0, 0.0, 1.0), offset=0.0, element_id=0)
# 200 x 100 px at 5 m with f = 200 px: 5 m x 2.5 m.
WALL_PX = shapely.box(59.5, 69.5, 259.5, 169.5)
DOOR_PX = shapely.box(109.5, 99.5, 129.5, 169.5)


def _planar(element_id, plane, corners3d, cls):
    basis = PlaneBasis.for_plane(plane)
    return PlanarPolygonSet(element_id, plane, Polygon(basis.to_2d(np.asarray(corners3d, dtype=float))), cls, basis)


def _floor(y0, y1, element_id=0):
    plane = Plane(normal=(0.0, 0.0, 1.0), offset=0.0, element_id=element_id)
    return _planar(element_id, plane, [(-1, y0, 0), (1, y0, 0), (1, y1, 0), (-1, y1, 0)], StructuralClass.FLOOR)


def _wall(z0, z1, element_id=1):
    plane = Plane(normal=(0.0, -1.0, 0.0), offset=4.0, element_id=element_id)
    return _planar(element_id, plane, [(-1, 4, z0), (1, 4, z0), (1, 4, z1), (-1, 4, z1)], StructuralClass.WALL)


class TestPlaneBasis:

    def test_orthonormal_and_on_plane(self):
        plane = Plane(normal=(0.3, -0.8, 0.2), offset=2.0)
        basis = PlaneBasis.for_plane(plane)
        assert np.isclose(basis.u @ basis.v, 0.0)
        assert np.isclose(np.linalg.norm(basis.u), 1.0)
        assert np.isclose(basis.u @ plane.normal, 0.0)
        assert abs(plane.signed_distance(basis.origin)[0]) < 1e-12

    def test_round_trip(self):
        basis = PlaneBasis.for_plane(WALL_PLANE)
        pts2 = np.array([[0.0, 0.0], [1.5, -2.0], [3.0, 4.0]])
        pts3 = basis.to_3d(pts2)
        assert np.allclose(WALL_PLANE.signed_distance(pts3), 0.0)
        assert np.allclose(basis.to_2d(pts3), pts2)


class TestUnprojectPolygon:
    """Image polygons onto a plane, clipped to valid rays."""

    def setup_method(self):
        self.cam = make_camera(center=(0.0, 0.0, 0.0))
        self.high_cam = make_camera(center=(0.0, 0.0, 1.5))

    def test_fronto_parallel_area(self):
        geom = unproject_polygon(WALL_PX, WALL_PLANE, self.cam)
        assert geom.area == pytest.approx(12.5, rel=1e-9)

    def test_polygon_crossing_horizon_is_clipped(self):
        geom = unproject_polygon(shapely.box(100, 60, 200, 200), FLOOR_PLANE, self.high_cam)
        assert geom.area > 0
        assert np.isfinite(geom.area)

    def test_polygon_above_horizon(self):
        with pytest.raises(FullyInvalidError):
            unproject_polygon(shapely.box(100, 10, 200, 100), FLOOR_PLANE, self.high_cam)

    def test_empty_polygon(self):
        with pytest.raises(FullyInvalidError):
            unproject_polygon(Polygon(), WALL_PLANE, self.cam)

    def test_union_of_parts(self):
        parts = [shapely.box(0, 0, 2, 1), shapely.box(1, 0, 3, 1)]
        merged = union_extent(3, WALL_PLANE, parts, StructuralClass.WALL)
        assert merged.area == pytest.approx(3.0)
        assert union_extent(3, WALL_PLANE, []).is_empty

    @pytest.mark.property
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 3), st.floats(0.1, 3)), min_size=1, max_size=6))
    def test_union_area_bounds(self, rects):
        parts = [shapely.box(x, y, x + w, y + h) for x, y, w, h in rects]
        merged = union_extent(3, WALL_PLANE, parts, StructuralClass.WALL)
        assert merged.area <= sum(p.area for p in parts) + 1e-4
        assert merged.area >= max(p.area for p in parts) - 1e-4


class TestBuildAndAttach:
    """Extents from annotated frames plus door placement."""

    def setup_method(self):
        self.frames = parse_frames([
            frame_record(0, [
                (1, "Wall", WALL_PX, WALL_PX),
                (2, "Door", DOOR_PX, DOOR_PX),
                (3, "Window", shapely.box(280, 10, 300, 30), None),
            ]),
        ])
        self.registry = match_elements(self.frames, [])
        self.cameras = {0: make_camera(center=(0.0, 0.0, 0.0))}
        self.wall_id = self.registry.global_id(0, 1)
        self.door_id = self.registry.global_id(0, 2)
        self.window_id = self.registry.global_id(0, 3)
        plane = Plane(normal=WALL_PLANE.normal, offset=WALL_PLANE.offset, element_id=self.wall_id)
        self.plane_set = PlaneSet(
            planes={self.wall_id: plane},
            classes=dict(self.registry.classes),
        )

    def test_build_extents(self):
        extents = build_extents(self.frames, self.registry, self.plane_set, self.cameras, [self.wall_id])
        assert list(extents) == [self.wall_id]
        assert extents[self.wall_id].area == pytest.approx(12.5, rel=1e-6)
        assert extents[self.wall_id].cls is StructuralClass.WALL

    def test_find_hosts(self):
        hosts, orphans = find_hosts(self.frames, self.registry)
        assert hosts == {self.door_id: self.wall_id}
        assert orphans == [self.window_id]

    def test_attach_and_triangulate(self):
        extents = build_extents(self.frames, self.registry, self.plane_set, self.cameras, [self.wall_id])
        hosts, _ = find_hosts(self.frames, self.registry)
        updated, openings = attach_doors_windows(extents, self.frames, self.registry, hosts, self.cameras)
        assert list(openings) == [self.door_id]
        # 20 x 70 px at 5 m.
        assert openings[self.door_id].area == pytest.approx(0.875, rel=1e-6)
        assert updated[self.wall_id].area == pytest.approx(12.5, rel=1e-6)

        mesh, failed = triangulate(updated, openings, hosts)
        assert failed == []
        assert mesh.element_area(self.door_id) == pytest.approx(0.875, rel=1e-6)
        assert mesh.element_area(self.wall_id) == pytest.approx(12.5 - 0.875, rel=1e-6)
        door_faces = mesh.element_ids == self.door_id
        assert np.all(mesh.class_ids[door_faces] == StructuralClass.DOOR.class_id)
        assert np.all(mesh.class_ids[~door_faces] == StructuralClass.WALL.class_id)
        assert np.allclose(WALL_PLANE.signed_distance(mesh.vertices), 0.0, atol=1e-9)

    def test_triangulate_nothing(self):
        mesh, failed = triangulate({})
        assert len(mesh.triangles) == 0
        assert failed == []


class TestRefine:
    """Closing gaps and trimming overshoots at shared lines."""

    def test_small_gaps_closed(self):
        out = refine({0: _floor(1.0, 3.9), 1: _wall(0.1, 2.5)}, [(0, 1)])
        assert out[0].area == pytest.approx(6.0, rel=1e-6)
        assert out[1].area == pytest.approx(5.0, rel=1e-6)

    def test_growth_is_bounded(self):
        # Closing the 0.5 m gap would grow the floor by 20%.
        floor = _floor(1.0, 3.5)
        out = refine({0: floor, 1: _wall(0.1, 2.5)}, [(0, 1)])
        assert out[0].area == pytest.approx(floor.area)

    def test_overshoot_cut(self):
        out = refine({0: _floor(1.0, 4.2), 1: _wall(0.0, 2.5)}, [(0, 1)])
        assert out[0].area == pytest.approx(6.0, rel=1e-6)
        assert out[1].area == pytest.approx(5.0, rel=1e-6)

    def test_parallel_and_unknown_pairs_ignored(self):
        a, b = _floor(0.0, 1.0, element_id=0), _floor(2.0, 3.0, element_id=1)
        out = refine({0: a, 1: b}, [(0, 1), (0, 9)])
        assert out[0].area == pytest.approx(a.area)
        assert out[1].area == pytest.approx(b.area)

    def test_inputs_untouched(self):
        floor = _floor(1.0, 3.9)
        refine({0: floor, 1: _wall(0.1, 2.5)}, [(0, 1)])
        assert floor.area == pytest.approx(5.8)
