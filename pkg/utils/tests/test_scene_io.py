"""
Test suite for scene bundle directories.
"""

import json

import numpy as np
import pytest

from roomlayout.exceptions import AnnotationParseError, SceneValidationError
from roomlayout.scene_io import (
    SceneBundle,
    camera_records,
    load_scene,
    parse_cameras,
    read_depth,
    read_depth_maps,
    validate_scene,
    write_depth,
    write_depth_maps,
    write_scene,
)
from utils.tests.scenes import make_camera, synthetic


def _camera_record(frame_index=0, **changes):
    record = camera_records({0: make_camera(frame_index)})[0]
    record["frame_index"] = frame_index
    record.update(changes)
    return record


class TestCameras:
    """cameras.json records."""

    def test_round_trip(self):
        cams = {3: make_camera(3, center=(1.0, 2.0, 1.5)), 1: make_camera(1)}
        again = parse_cameras(camera_records(cams))
        assert list(again) == [1, 3]
        assert np.allclose(again[3].center, [1.0, 2.0, 1.5])
        assert again[3].annotated

    def test_not_a_list(self):
        with pytest.raises(SceneValidationError, match="array"):
            parse_cameras({"frame_index": 0})

    def test_short_matrix(self):
        with pytest.raises(SceneValidationError, match="K"):
            parse_cameras([_camera_record(K=[1.0, 0.0, 0.0])])

    def test_duplicate_frame(self):
        with pytest.raises(SceneValidationError, match="duplicate"):
            parse_cameras([_camera_record(2), _camera_record(2)])

    def test_reflection_rejected(self):
        with pytest.raises(SceneValidationError, match="camera 0"):
            parse_cameras([_camera_record(R=[1.0, 0, 0, 0, 1.0, 0, 0, 0, -1.0])])


class TestDepth:
    """16-bit millimetre PNG and raw float32 depth."""

    def setup_method(self):
        self.depth = np.full((6, 8), 2.345)
        self.depth[0, 0] = np.nan
        self.depth[1, 1] = np.inf

    def test_png16(self, tmp_path):
        path = str(tmp_path / "d.png")
        write_depth(path, self.depth, "png16")
        again = read_depth(path, "png16")
        assert again.shape == (6, 8)
        assert np.isnan(again[0, 0]) and np.isnan(again[1, 1])
        assert again[2, 2] == pytest.approx(2.345)

    def test_f32(self, tmp_path):
        path = str(tmp_path / "d.f32")
        write_depth(path, self.depth, "f32")
        again = read_depth(path, "f32", size=(8, 6))
        assert np.isnan(again[0, 0]) and np.isnan(again[1, 1])
        assert again[2, 2] == pytest.approx(2.345, rel=1e-6)

    def test_f32_size_mismatch(self, tmp_path):
        path = str(tmp_path / "d.f32")
        write_depth(path, self.depth, "f32")
        with pytest.raises(SceneValidationError, match="expected"):
            read_depth(path, "f32", size=(8, 5))

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError, match="unknown depth format"):
            write_depth(str(tmp_path / "d.exr"), self.depth, "exr")

    @pytest.mark.parametrize("fmt", ["png16", "f32"])
    def test_directory_manifest(self, tmp_path, fmt):
        write_depth_maps(str(tmp_path), {0: self.depth, 5: self.depth}, fmt)
        manifest = json.loads((tmp_path / "depth.json").read_text())
        assert manifest == {"format": fmt, "width": 8, "height": 6, "frames": [0, 5]}
        again = read_depth_maps(str(tmp_path))
        assert sorted(again) == [0, 5]
        assert again[5][3, 3] == pytest.approx(2.345, rel=1e-6)

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "depth.json").write_text(json.dumps({"format": "png16"}))
        with pytest.raises(SceneValidationError, match="manifest"):
            read_depth_maps(str(tmp_path))


class TestBundles:
    """Writing and re-reading whole scene directories."""

    @classmethod
    def setup_class(cls):
        cls.bundle, cls.scene = synthetic("cuboid", frames=6, annotate_every=5)

    def test_write_then_load(self, tmp_path):
        directory = tmp_path / "room_a"
        write_scene(str(directory), self.bundle, tracks={0: {0: np.array([1.0, 2.0]), 5: np.array([3.0, 4.0])}})
        loaded = load_scene(str(directory))
        assert loaded.scene_id == "room_a"
        assert sorted(loaded.cameras) == sorted(self.bundle.cameras)
        assert loaded.annotated_frames == [0, 5]
        for a, b in zip(loaded.frames, self.bundle.frames):
            assert [(e.local_id, e.cls) for e in a.elements] == [(e.local_id, e.cls) for e in b.elements]
            for ea, eb in zip(a.elements, b.elements):
                assert ea.amodal.area == pytest.approx(eb.amodal.area, abs=1e-3)
        assert loaded.tracks_path == str(directory / "tracks.json")
        assert loaded.ground_truth == json.loads(json.dumps(self.bundle.ground_truth))
        assert sorted(loaded.depth) == [0, 5]
        finite = np.isfinite(self.bundle.depth[0])
        assert np.allclose(loaded.depth[0][finite], self.bundle.depth[0][finite], atol=6e-4)
        assert loaded.oracle is None

    def test_tracks_file_shape(self, tmp_path):
        write_scene(str(tmp_path), self.bundle, tracks={4: {5: np.array([3.0, 4.0]), 0: np.array([1.0, 2.0])}})
        records = json.loads((tmp_path / "tracks.json").read_text())
        assert records == [{"track_id": 4, "points": [
            {"frame": 0, "x": 1.0, "y": 2.0}, {"frame": 5, "x": 3.0, "y": 4.0},
        ]}]

    def test_optional_files_absent(self, tmp_path):
        bare = SceneBundle(scene_id="bare", cameras=self.bundle.cameras, frames=self.bundle.frames)
        write_scene(str(tmp_path), bare)
        loaded = load_scene(str(tmp_path))
        assert loaded.tracks_path is None
        assert loaded.depth == {}
        assert loaded.ground_truth is None

    def test_missing_directory(self, tmp_path):
        with pytest.raises(SceneValidationError, match="not found"):
            load_scene(str(tmp_path / "nowhere"))

    def test_missing_cameras(self, tmp_path):
        write_scene(str(tmp_path), self.bundle)
        (tmp_path / "cameras.json").unlink()
        with pytest.raises(SceneValidationError, match="missing file"):
            load_scene(str(tmp_path))

    def test_missing_annotations(self, tmp_path):
        write_scene(str(tmp_path), self.bundle)
        (tmp_path / "annotations.json").unlink()
        with pytest.raises(AnnotationParseError):
            load_scene(str(tmp_path))

    def test_annotated_frame_without_camera(self):
        cameras = {k: v for k, v in self.bundle.cameras.items() if k != 5}
        bundle = SceneBundle(scene_id="x", cameras=cameras, frames=self.bundle.frames)
        with pytest.raises(SceneValidationError, match=r"\[5\]"):
            validate_scene(bundle)

    def test_no_annotated_frames(self):
        with pytest.raises(SceneValidationError, match="no annotated frames"):
            validate_scene(SceneBundle(scene_id="x", cameras=self.bundle.cameras, frames=[]))
