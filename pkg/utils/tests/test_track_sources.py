"""
Test suite for file-backed and oracle track sources.
"""

import numpy as np
import pytest

from roomlayout.config.models import TrackingConfig
from roomlayout.exceptions import TrackSourceError
from roomlayout.geometry import pixel_directions
from roomlayout.scene_io import write_tracks
from roomlayout.track_sources import FileTrackSource, OracleTrackSource, parse_track_records
from utils.tests.scenes import make_camera


def _records(tracks):
    return [
        {"track_id": tid, "points": [{"frame": f, "x": p[0], "y": p[1]} for f, p in pts.items()]}
        for tid, pts in tracks.items()
    ]


class TestParseTrackRecords:

    def test_parses(self):
        tracks = parse_track_records(_records({3: {0: (1.0, 2.0), 1: (2.0, 2.0)}}))
        assert list(tracks) == [3]
        assert np.allclose(tracks[3][1], [2.0, 2.0])

    def test_requires_array(self):
        with pytest.raises(TrackSourceError, match="array"):
            parse_track_records({"tracks": []})

    def test_duplicate_track(self):
        data = _records({1: {0: (0.0, 0.0)}}) * 2
        with pytest.raises(TrackSourceError, match="duplicate"):
            parse_track_records(data)

    def test_missing_field(self):
        with pytest.raises(TrackSourceError, match="malformed"):
            parse_track_records([{"track_id": 1, "points": [{"frame": 0, "x": 1.0}]}])

    def test_non_finite(self):
        with pytest.raises(TrackSourceError, match="non-finite"):
            parse_track_records(_records({1: {0: (float("nan"), 0.0)}}))


class TestFileTrackSource:
    """Sparse tracks used as an inverse-distance motion field."""

    def setup_method(self):
        self.tracks = {
            0: {0: np.array([10.0, 10.0]), 1: np.array([13.0, 10.0]), 2: np.array([16.0, 12.0])},
            1: {0: np.array([50.0, 50.0]), 1: np.array([50.0, 54.0])},
        }
        self.source = FileTrackSource(self.tracks)

    def test_frames_and_coverage(self):
        assert self.source.frames == [0, 1, 2]
        assert self.source.covers(0, 1) and self.source.covers(1, 0)
        assert self.source.covers(1, 2) and self.source.covers(2, 1)
        assert not self.source.covers(0, 2)

    def test_explicit_frame_list(self):
        source = FileTrackSource(self.tracks, frame_indices=[0, 1, 2, 3])
        assert source.frames == [0, 1, 2, 3]
        assert not source.covers(2, 3)

    def test_exact_point_follows_its_track(self):
        moved, alive = self.source.advance(0, 1, np.array([[10.0, 10.0]]))
        assert alive.tolist() == [True]
        assert np.allclose(moved, [[13.0, 10.0]])
        back, _ = self.source.advance(1, 0, moved)
        assert np.allclose(back, [[10.0, 10.0]])

    def test_nearby_point_uses_local_motion(self):
        moved, alive = self.source.advance(0, 1, np.array([[12.0, 10.0]]))
        assert alive[0]
        assert np.allclose(moved, [[15.0, 10.0]])

    def test_inverse_distance_blend(self):
        source = FileTrackSource(self.tracks, cfg=TrackingConfig(flow_radius_px=100.0))
        moved, alive = source.advance(0, 1, np.array([[30.0, 30.0]]))
        assert alive[0]
        # Equidistant from displacements (3, 0) and (0, 4).
        assert np.allclose(moved, [[31.5, 32.0]])

    def test_far_point_is_lost(self):
        moved, alive = self.source.advance(0, 1, np.array([[200.0, 200.0], [10.0, 10.0]]))
        assert alive.tolist() == [False, True]
        assert np.all(np.isnan(moved[0]))

    def test_uncovered_pair_raises(self):
        with pytest.raises(TrackSourceError) as info:
            self.source.advance(0, 2, np.array([[10.0, 10.0]]))
        assert info.value.frame_pair == (0, 2)

    def test_empty_query(self):
        moved, alive = self.source.advance(0, 1, np.zeros((0, 2)))
        assert moved.shape == (0, 2)
        assert alive.shape == (0,)

    def test_observe_is_identity(self):
        pts = np.array([[1.0, 2.0]])
        assert self.source.observe(0, 1, pts) is pts

    def test_from_file(self, tmp_path):
        path = tmp_path / "tracks.json"
        write_tracks(str(path), self.tracks)
        source = FileTrackSource.from_file(str(path))
        moved, _ = source.advance(1, 2, np.array([[13.0, 10.0]]))
        assert np.allclose(moved, [[16.0, 12.0]])

    def test_from_missing_file(self, tmp_path):
        with pytest.raises(TrackSourceError, match="not found"):
            FileTrackSource.from_file(str(tmp_path / "missing.json"))

    def test_from_invalid_json(self, tmp_path):
        path = tmp_path / "tracks.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(TrackSourceError, match="JSON"):
            FileTrackSource.from_file(str(path))


class WallScene:
    """One wall at y = 5; frames listed in `blocked` see an occluder at y = 3."""

    WALL_Y = 5.0

    def __init__(self, cameras, blocked=()):
        self.cameras = cameras
        self.blocked = set(blocked)

    def raycast(self, camera, pixels):
        dirs = pixel_directions(camera, pixels)
        if camera.frame_index in self.blocked:
            depth = (3.0 - camera.center[1]) / dirs[:, 1]
            return np.ones(len(dirs), dtype=int), depth
        depth = (self.WALL_Y - camera.center[1]) / dirs[:, 1]
        return np.where(depth > 0, 0, -1), depth


class TestOracleTrackSource:
    """Exact motion from a known surface."""

    def setup_method(self):
        self.cameras = [
            make_camera(0, center=(0.0, 0.0, 0.0)),
            make_camera(1, center=(0.2, 0.0, 0.0)),
            make_camera(2, center=(0.4, 0.0, 0.0)),
        ]
        self.centre = np.array([[159.5, 119.5]])

    def test_exact_reprojection(self):
        source = OracleTrackSource(WallScene(self.cameras))
        moved, alive = source.advance(0, 1, self.centre)
        assert alive.tolist() == [True]
        # 0.2 m sideways at 5 m depth with a 200 px focal length.
        assert np.allclose(moved, [[151.5, 119.5]])

    def test_frames_and_coverage(self):
        source = OracleTrackSource(WallScene(self.cameras))
        assert source.frames == [0, 1, 2]
        assert source.covers(0, 2)
        assert not source.covers(0, 7)

    def test_hidden_surface_loses_point(self):
        source = OracleTrackSource(WallScene(self.cameras, blocked=[1]))
        _, alive = source.advance(0, 1, self.centre)
        assert alive.tolist() == [False]

    def test_dropout_is_seeded(self):
        pts = np.column_stack([np.linspace(10, 300, 200), np.full(200, 119.5)])
        a = OracleTrackSource(WallScene(self.cameras), seed=4, dropout=0.5).advance(0, 1, pts)[1]
        b = OracleTrackSource(WallScene(self.cameras), seed=4, dropout=0.5).advance(0, 1, pts)[1]
        assert np.array_equal(a, b)
        assert 0 < a.sum() < len(a)

    def test_observation_noise(self):
        source = OracleTrackSource(WallScene(self.cameras), noise_px=1.0, seed=2)
        pts = np.tile(self.centre, (500, 1))
        assert source.observe(0, 0, pts) is pts
        noisy = source.observe(0, 1, pts)
        assert np.allclose(noisy, source.observe(0, 1, pts))
        assert 0.8 < np.std(noisy - pts) < 1.2

    def test_noise_free_observation(self):
        source = OracleTrackSource(WallScene(self.cameras))
        pts = self.centre.copy()
        assert source.observe(0, 1, pts) is pts
