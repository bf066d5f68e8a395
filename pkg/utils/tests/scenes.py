"""Small builders shared by the test suites."""

import numpy as np
from shapely.geometry.polygon import orient

from roomlayout.annotations import parse_annotations
from roomlayout.config import PipelineConfig
from roomlayout.config.models import SyntheticConfig
from roomlayout.geometry import CameraFrame, look_at_rotation
from roomlayout.synthetic import generate


def make_camera(frame_index=0, center=(0.0, 0.0, 0.0), forward=(0.0, 1.0, 0.0), focal=200.0,
                size=(320, 240), annotated=True) -> CameraFrame:
    w, h = size
    K = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    R = look_at_rotation(forward)
    return CameraFrame(
        frame_index=frame_index,
        intrinsics=K,
        rotation=R,
        translation=-R @ np.asarray(center, dtype=np.float64),
        annotated=annotated,
    )


def ring(geom):
    """Exterior ring of a polygon as a JSON-ready list (counter-clockwise)."""
    coords = np.asarray(orient(geom, 1.0).exterior.coords)[:-1]
    return [[float(x), float(y)] for x, y in coords]


def frame_record(frame_index, elements, size=(320, 240), occlusion_edges=()):
    """elements: [(local_id, class name, amodal polygon, visible polygon or None)]."""
    return {
        "frame_index": frame_index,
        "width": size[0],
        "height": size[1],
        "elements": [
            {
                "local_id": lid,
                "class": cls,
                "amodal": [ring(amodal)],
                "visible": [ring(visible)] if visible is not None else [],
            }
            for lid, cls, amodal, visible in elements
        ],
        "occlusion_edges": [list(map(list, line)) for line in occlusion_edges],
    }


def parse_frames(records):
    return list(parse_annotations(records))


def synthetic(preset="cuboid", **overrides):
    """Synthetic bundle + scene at the default test resolution."""
    cfg = SyntheticConfig(preset=preset, **overrides)
    return generate(cfg)


def fast_config(runs=1, **solver):
    """Pipeline config with a short optimisation budget (decayed step)."""
    solver_cfg = {
        "max_iterations": 3000,
        "patience": 300,
        "lr_decay": 0.5,
        "decay_patience": 100,
        "reinit_after": 200,
        "log_every": 500,
    }
    solver_cfg.update(solver)
    return PipelineConfig().with_overrides({"solver": solver_cfg, "qc": {"runs": runs}})


def truth_ids(registry, scene):
    """Reconstructed global id -> ground-truth surface ids sharing its annotations."""
    owners = {}
    for key, gid in registry.mapping.items():
        owners.setdefault(gid, set()).add(scene.registry.mapping[key])
    return owners


def same_partition(registry, scene):
    """True when reconstructed ids group annotations exactly like the ground truth."""
    owners = truth_ids(registry, scene)
    claimed = [gt for gts in owners.values() for gt in gts]
    return all(len(gts) == 1 for gts in owners.values()) and len(claimed) == len(set(claimed))


def plane_errors(planes, registry, scene, skip=()):
    """
    Worst normal angle (degrees) and worst offset error over reconstructed
    structural planes, each against the ground-truth surface its annotations
    belong to. Offset error is relative to max(|offset|, 1 m).
    """
    owners = truth_ids(registry, scene)
    worst_angle = worst_offset = 0.0
    for gid, plane in planes.planes.items():
        if gid in skip:
            continue
        (gt,) = owners[gid]
        truth = scene.surfaces[gt].plane
        cos = float(np.dot(plane.normal, truth.normal))
        sign = 1.0 if cos >= 0 else -1.0
        worst_angle = max(worst_angle, float(np.degrees(np.arccos(min(1.0, abs(cos))))))
        worst_offset = max(worst_offset, abs(sign * plane.offset - truth.offset) / max(abs(truth.offset), 1.0))
    return worst_angle, worst_offset
