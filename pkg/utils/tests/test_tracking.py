"""
Test suite for sampling, track building, element matching and assignment.
"""

import itertools
from functools import lru_cache

import numpy as np
import pytest
import shapely

from roomlayout.annotations import StructuralClass
from roomlayout.config.models import SamplerConfig, TrackingConfig
from roomlayout.exceptions import EmptyVisibleError, TrackSourceError
from roomlayout.track_sources import TrackSource
from roomlayout.tracking import (
    ElementRegistry,
    PointTrack,
    assign_tracks,
    best_matching,
    build_tracks,
    element_labels,
    match_elements,
    sample_points,
)
from utils.tests.scenes import frame_record, parse_frames

LEFT = shapely.box(0, 0, 100, 100)
RIGHT = shapely.box(100, 0, 200, 100)


class ShiftSource(TrackSource):
    """Every point moves by a fixed offset per frame step."""

    def __init__(self, frames, step=(5.0, 0.0), missing=()):
        self._frames = list(frames)
        self.step = np.asarray(step)
        self.missing = {tuple(sorted(p)) for p in missing}

    @property
    def frames(self):
        return self._frames

    def covers(self, src, dst):
        return tuple(sorted((src, dst))) not in self.missing

    def advance(self, src, dst, points):
        pts = np.atleast_2d(points)
        return pts + np.sign(dst - src) * self.step, np.ones(len(pts), dtype=bool)


@lru_cache(maxsize=None)
def _permutations(n_rows, n_cols):
    return np.array(list(itertools.permutations(range(n_cols), n_rows)), dtype=int).reshape(-1, n_rows)


def _brute_force_best(counts):
    rows, cols = counts.shape
    if rows > cols:
        return _brute_force_best(counts.T)
    perms = _permutations(rows, cols)
    return int(counts[np.arange(rows), perms].sum(axis=1).max())


class TestBestMatching:
    """Hungarian assignment against exhaustive search."""

    def test_matches_exhaustive_optimum(self):
        rng = np.random.default_rng(1234)
        for _ in range(1000):
            rows, cols = rng.integers(1, 9, size=2)
            counts = rng.integers(0, 20, size=(rows, cols))
            if rng.random() < 0.3:
                counts[rng.random(counts.shape) < 0.5] = 0
            pairs = best_matching(counts)
            total = sum(int(counts[r, c]) for r, c in pairs)
            assert total == _brute_force_best(counts)
            assert len({r for r, _ in pairs}) == len(pairs)
            assert len({c for _, c in pairs}) == len(pairs)
            assert all(counts[r, c] > 0 for r, c in pairs)

    def test_empty_matrix(self):
        assert best_matching(np.zeros((0, 3))) == []

    def test_zero_pairs_dropped(self):
        assert best_matching(np.array([[0, 0], [0, 4]])) == [(1, 1)]


class TestSamplePoints:
    """Scrambled-Sobol sampling on visible parts."""

    def setup_method(self):
        self.fa = parse_frames([frame_record(0, [(1, "Wall", LEFT, LEFT), (2, "Wall", RIGHT, None)])])[0]

    def test_count_and_containment(self):
        samples = sample_points(self.fa, SamplerConfig(target_spacing=30.0, seed=3))
        assert len(samples) == round(10000 / 900)
        for xy, lid in samples:
            assert lid == 1
            assert LEFT.contains(shapely.Point(xy))

    def test_seeded(self):
        a = sample_points(self.fa, SamplerConfig(seed=5))
        b = sample_points(self.fa, SamplerConfig(seed=5))
        c = sample_points(self.fa, SamplerConfig(seed=6))
        assert np.array_equal(np.array([p for p, _ in a]), np.array([p for p, _ in b]))
        assert not np.array_equal(np.array([p for p, _ in a]), np.array([p for p, _ in c]))

    def test_spacing_controls_density(self):
        dense = sample_points(self.fa, SamplerConfig(target_spacing=10.0))
        assert len(dense) == 100

    def test_no_visible_area(self):
        fa = parse_frames([frame_record(0, [(1, "Wall", LEFT, None)])])[0]
        with pytest.raises(EmptyVisibleError):
            sample_points(fa)

    def test_too_small_for_one_sample(self):
        fa = parse_frames([frame_record(0, [(1, "Wall", LEFT, shapely.box(0, 0, 10, 10))])])[0]
        with pytest.raises(EmptyVisibleError):
            sample_points(fa, SamplerConfig(target_spacing=30.0))


class TestBuildTracks:
    """Forward/backward extension through a track source."""

    def setup_method(self):
        self.samples = {2: [(np.array([50.0, 50.0]), 1), (np.array([310.0, 50.0]), 1)]}

    def test_extends_both_ways(self):
        tracks = build_tracks(self.samples, ShiftSource(range(5)), (320, 240))
        first = tracks[0]
        assert first.origin_frame == 2
        assert first.frames == [0, 1, 2, 3, 4]
        for f in first.frames:
            assert np.allclose(first.points[f], [50.0 + 5.0 * (f - 2), 50.0])

    def test_points_leaving_image_stop(self):
        tracks = build_tracks(self.samples, ShiftSource(range(5)), (320, 240))
        edge = [t for t in tracks if np.allclose(t.points[2], [310.0, 50.0])][0]
        # 310 -> 315 stays inside, 320 leaves a 320 px wide image.
        assert edge.frames == [0, 1, 2, 3]

    def test_gap_between_annotated_frames_raises(self):
        samples = {0: self.samples[2], 4: self.samples[2]}
        with pytest.raises(TrackSourceError) as info:
            build_tracks(samples, ShiftSource(range(5), missing=[(1, 2)]), (320, 240))
        assert set(info.value.frame_pair) == {1, 2}

    def test_gap_outside_annotated_range_ends_track(self):
        tracks = build_tracks(self.samples, ShiftSource(range(5), missing=[(3, 4)]), (320, 240))
        assert tracks[0].frames == [0, 1, 2, 3]

    def test_single_frame_tracks_dropped(self):
        tracks = build_tracks(self.samples, ShiftSource([2]), (320, 240))
        assert tracks == []

    def test_unknown_annotated_frame(self):
        with pytest.raises(TrackSourceError):
            build_tracks({9: self.samples[2]}, ShiftSource(range(5)), (320, 240))


def _track(track_id, points):
    return PointTrack(track_id=track_id, points={f: np.asarray(p, dtype=float) for f, p in points.items()})


class TestCorrespondence:
    """Element matching and track assignment."""

    def setup_method(self):
        self.frames = parse_frames([
            frame_record(0, [(1, "Wall", LEFT, LEFT), (2, "Wall", RIGHT, RIGHT)]),
            frame_record(10, [(7, "Wall", RIGHT, RIGHT), (3, "Wall", LEFT, LEFT)]),
        ])
        self.tracks = [
            _track(0, {0: (20, 20), 10: (22, 20)}),
            _track(1, {0: (30, 60), 10: (31, 61)}),
            _track(2, {0: (150, 50), 10: (151, 50)}),
            _track(3, {0: (20, 80), 10: (150, 80)}),
            _track(4, {5: (20, 20), 6: (21, 20)}),
        ]

    def test_element_labels_prefer_smallest(self):
        door = shapely.box(20, 20, 40, 80)
        fa = parse_frames([frame_record(0, [(1, "Wall", LEFT, None), (2, "Door", door, None)])])[0]
        assert element_labels(fa, np.array([[30.0, 50.0], [5.0, 5.0], [500.0, 5.0]])) == [2, 1, None]

    def test_match_follows_tracks(self):
        registry = match_elements(self.frames, self.tracks)
        assert registry.global_id(0, 1) == registry.global_id(10, 3)
        assert registry.global_id(0, 2) == registry.global_id(10, 7)
        assert registry.global_id(0, 1) != registry.global_id(0, 2)
        assert registry.element_ids == [0, 1]
        assert registry.local_to_global(10) == {7: registry.global_id(0, 2), 3: registry.global_id(0, 1)}

    def test_classes_never_match(self):
        frames = parse_frames([
            frame_record(0, [(1, "Wall", LEFT, None)]),
            frame_record(10, [(3, "Floor", LEFT, None)]),
        ])
        registry = match_elements(frames, self.tracks)
        assert registry.global_id(0, 1) != registry.global_id(10, 3)
        assert registry.classes[registry.global_id(10, 3)] is StructuralClass.FLOOR

    def test_unmatched_element_gets_fresh_id(self):
        registry = match_elements(self.frames, [])
        assert len(registry.element_ids) == 4

    def test_untracked_sliver_keeps_its_id(self):
        top, rest = shapely.box(0, 0, 200, 40), shapely.box(0, 40, 200, 100)
        sliver = shapely.box(0, 0, 20, 2)
        frames = parse_frames([
            frame_record(0, [(1, "Ceiling", top, top), (2, "Wall", rest, rest)]),
            frame_record(10, [(4, "Wall", rest, rest), (3, "Ceiling", top, top)]),
            frame_record(20, [(5, "Ceiling", sliver, sliver), (6, "Wall", rest - sliver, rest - sliver)]),
        ])
        tracks = [
            _track(0, {0: (50, 20), 10: (52, 20)}),
            _track(1, {0: (120, 60), 10: (121, 60), 20: (122, 60)}),
            _track(2, {0: (150, 80), 10: (151, 80), 20: (152, 80)}),
        ]
        registry = match_elements(frames, tracks)
        ceiling = registry.global_id(0, 1)
        assert registry.global_id(10, 3) == ceiling
        assert registry.global_id(20, 5) == ceiling
        assert registry.global_id(20, 6) == registry.global_id(0, 2)
        assert registry.element_ids == [0, 1]

    def test_untracked_element_takes_nearest_candidate(self):
        frames = parse_frames([
            frame_record(0, [(1, "Wall", LEFT, LEFT), (2, "Wall", RIGHT, RIGHT)]),
            frame_record(10, [(3, "Wall", shapely.box(190, 0, 200, 5), None)]),
        ])
        registry = match_elements(frames, self.tracks[:3])
        assert registry.global_id(10, 3) == registry.global_id(0, 2)
        assert len(registry.element_ids) == 2

    def test_untracked_element_without_free_candidate_gets_fresh_id(self):
        frames = parse_frames([
            frame_record(0, [(1, "Wall", LEFT, LEFT)]),
            frame_record(10, [(3, "Wall", LEFT, LEFT), (4, "Wall", shapely.box(195, 0, 200, 5), None)]),
        ])
        registry = match_elements(frames, self.tracks[:2])
        assert registry.global_id(10, 3) == registry.global_id(0, 1)
        assert registry.global_id(10, 4) not in registry.local_to_global(0).values()
        assert len(registry.element_ids) == 2

    def test_element_relinks_across_a_gap(self):
        frames = parse_frames([
            frame_record(0, [(1, "Wall", LEFT, LEFT), (2, "Floor", RIGHT, RIGHT)]),
            frame_record(10, [(3, "Floor", RIGHT, RIGHT)]),
            frame_record(20, [(4, "Wall", LEFT, LEFT), (5, "Floor", RIGHT, RIGHT)]),
        ])
        tracks = [
            _track(0, {0: (20, 20), 20: (21, 20)}),
            _track(1, {0: (150, 50), 10: (150, 51), 20: (151, 50)}),
        ]
        registry = match_elements(frames, tracks)
        assert registry.global_id(20, 4) == registry.global_id(0, 1)
        assert registry.global_id(20, 5) == registry.global_id(10, 3) == registry.global_id(0, 2)
        assert registry.element_ids == [0, 1]

    def test_assignment_majority(self):
        registry = match_elements(self.frames, self.tracks)
        assignment = assign_tracks(self.tracks, registry, self.frames, TrackingConfig())
        left, right = registry.global_id(0, 1), registry.global_id(0, 2)
        assert assignment[0] == left
        assert assignment[1] == left
        assert assignment[2] == right
        # Split vote (1 of 2) does not beat the 0.5 threshold.
        assert 3 not in assignment
        # Never touches an annotated frame.
        assert 4 not in assignment

    def test_lower_threshold_keeps_first_label(self):
        registry = match_elements(self.frames, self.tracks)
        assignment = assign_tracks(self.tracks, registry, self.frames, TrackingConfig(consistency_threshold=0.4))
        assert assignment[3] == registry.global_id(0, 1)

    def test_registry_records_round_trip(self):
        registry = match_elements(self.frames, self.tracks)
        again = ElementRegistry.from_records(registry.to_records())
        assert again.mapping == registry.mapping
        assert again.classes == registry.classes
