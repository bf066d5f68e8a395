"""
Pipeline - Multi-run reconstruction of one scene.

Per run (seeded base_seed + run_index):
1. Sample points on the visible parts of every annotated frame
2. Extend them into point tracks through the track source
3. Match elements across annotated frames (global ids)
4. Find door/window hosts, assign tracks to elements
5. Extract edge points, optimise the plane set
6. Build extents, refine, attach doors/windows, triangulate
7. Score the mesh by reprojection IoU

A run that raises scores IoU 0 and the scene keeps going. The best run is
chosen by quality control; its mesh, planes and report are the result.
"""

import functools
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from roomlayout.annotations import extract_edge_points, neighbor_pairs
from roomlayout.config import PipelineConfig
from roomlayout.evaluation import IoUReport, QCDecision, depth_error, reprojection_iou, select_best_run, visible_masks
from roomlayout.exceptions import (
    AllRunsFailedError,
    EmptyVisibleError,
    LayoutError,
    NoValidPixelsError,
    SceneValidationError,
    TrackSourceError,
)
from roomlayout.extent import LayoutMesh, attach_doors_windows, build_extents, find_hosts, refine, triangulate
from roomlayout.mesh_io import write_obj, write_ply
from roomlayout.scene_io import SceneBundle, validate_scene, write_json
from roomlayout.solver import PlaneSet, optimize
from roomlayout.synthetic import SyntheticScene
from roomlayout.track_sources import FileTrackSource, OracleTrackSource, TrackSource
from roomlayout.tracking import ElementRegistry, assign_tracks, build_tracks, match_elements, sample_points
from utils.logger import LayoutLogger

MESH_PLY = "mesh.ply"
MESH_OBJ = "mesh.obj"
REPORT_FILE = "report.json"
PLANES_FILE = "planes.json"
REGISTRY_FILE = "registry.json"

# Loss variants for ablation sweeps: name -> solver switches.
ABLATIONS: Dict[str, Dict[str, bool]] = {
    "full": {},
    "no_edge": {"use_edge_loss": False},
    "no_track": {"use_track_loss": False},
    "no_perp": {"use_perp_loss": False},
}

# Numeric failures inside a run are scored like pipeline errors.
_RUN_ERRORS = (LayoutError, FloatingPointError, ValueError)


@dataclass(eq=False)
class RunResult:
    run_index: int
    seed: int
    mean_iou: float = 0.0
    frame_mean_iou: float = 0.0
    iterations: int = 0
    final_loss: Optional[float] = None
    error_type: Optional[str] = None
    error_message: Optional[str] = None
    planes: Optional[PlaneSet] = None
    mesh: Optional[LayoutMesh] = None
    registry: Optional[ElementRegistry] = None
    iou_report: Optional[IoUReport] = None
    unconstrained: List[int] = field(default_factory=list)
    failed_triangulation: List[int] = field(default_factory=list)
    orphans: List[int] = field(default_factory=list)
    loss_curve: List[Any] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.error_type is not None

    def provenance(self) -> dict:
        record = {
            "run_index": self.run_index,
            "seed": self.seed,
            "mean_iou": self.mean_iou,
            "frame_mean_iou": self.frame_mean_iou,
            "iterations": self.iterations,
            "final_loss": self.final_loss,
            "error_type": self.error_type,
        }
        if self.loss_curve:
            losses = [loss for _, loss in self.loss_curve if np.isfinite(loss)]
            record["loss_curve"] = {
                "samples": len(self.loss_curve),
                "first": losses[0] if losses else None,
                "last": losses[-1] if losses else None,
            }
        return record


@dataclass(eq=False)
class ReconstructionResult:
    scene_id: str
    runs: List[RunResult]
    decision: QCDecision
    config: PipelineConfig
    depth_error: Optional[float] = None

    @property
    def best(self) -> RunResult:
        return self.runs[self.decision.best_index]

    @property
    def planes(self) -> PlaneSet:
        return self.best.planes

    @property
    def mesh(self) -> LayoutMesh:
        return self.best.mesh

    @property
    def registry(self) -> ElementRegistry:
        return self.best.registry

    @property
    def accepted(self) -> bool:
        return self.decision.accepted

    def report(self) -> dict:
        """Metrics report; holds no wall-clock values so it is reproducible."""
        best = self.best
        return {
            "scene_id": self.scene_id,
            "accepted": self.accepted,
            "qc": {**self.decision.to_dict(), "threshold": self.config.qc.iou_threshold},
            "seed": best.seed,
            "iou": best.iou_report.to_dict() if best.iou_report else None,
            "depth_error": self.depth_error,
            "unconstrained": sorted(best.unconstrained),
            "failed_triangulation": sorted(best.failed_triangulation),
            "orphan_openings": sorted(best.orphans),
            "mesh": {
                "vertices": int(len(best.mesh.vertices)) if best.mesh else 0,
                "faces": int(len(best.mesh.triangles)) if best.mesh else 0,
            },
            "runs": [r.provenance() for r in self.runs],
            "config": self.config.model_dump(mode="json"),
        }


# ----------------------------------------------------------------------------
# Track source
# ----------------------------------------------------------------------------

def _oracle_scene(scene: SceneBundle) -> Optional[SyntheticScene]:
    if scene.oracle is not None:
        return scene.oracle
    if scene.ground_truth is not None:
        try:
            return SyntheticScene.from_record(scene.ground_truth, scene.cameras)
        except (KeyError, TypeError, ValueError) as e:
            raise SceneValidationError(f"ground truth of scene '{scene.scene_id}' is malformed: {e}") from e
    return None


def make_track_source(scene: SceneBundle, config: PipelineConfig, use_oracle: bool = False) -> TrackSource:
    """
    tracks.json when present (unless the oracle is forced), otherwise exact
    motion from the scene's ground truth.
    """
    if scene.tracks_path and not use_oracle:
        try:
            return FileTrackSource.from_file(scene.tracks_path, sorted(scene.cameras), config.tracking)
        except TrackSourceError as e:
            raise SceneValidationError(str(e)) from e
    oracle = _oracle_scene(scene)
    if oracle is None:
        raise SceneValidationError(f"scene '{scene.scene_id}' has neither tracks nor ground truth")
    return OracleTrackSource(oracle, oracle.track_noise_px, oracle.seed, oracle.occlusion_dropout)


# ----------------------------------------------------------------------------
# One run
# ----------------------------------------------------------------------------

def _reconstruct_run(
    scene: SceneBundle,
    source: TrackSource,
    config: PipelineConfig,
    result: RunResult,
    request_id: str,
) -> None:
    logger = LayoutLogger()
    frames = scene.frames
    cameras = scene.cameras

    # STEP 1: Sampling
    sampler_cfg = config.sampler.model_copy(update={"seed": result.seed})
    samples = {}
    for fa in frames:
        try:
            samples[fa.frame_index] = sample_points(fa, sampler_cfg)
        except EmptyVisibleError as e:
            logger.log_warning(request_id, str(e), event_type="empty_visible", context={"frame_index": fa.frame_index})

    # STEP 2: Tracks
    start = time.time()
    tracks = build_tracks(samples, source, frames[0].image_size)
    logger.log_stage(
        request_id,
        "tracks_built",
        counts={"samples": sum(len(s) for s in samples.values()), "tracks": len(tracks)},
        latency_ms=(time.time() - start) * 1000,
    )

    # STEP 3: Correspondence
    registry = match_elements(frames, tracks)
    result.registry = registry
    logger.log_stage(
        request_id,
        "elements_matched",
        counts={"elements": len(registry.element_ids), "frames": len(frames)},
    )

    # STEP 4: Hosts and track assignment
    hosts, orphans = find_hosts(frames, registry, request_id)
    result.orphans = orphans
    assignment = assign_tracks(tracks, registry, frames, config.tracking)
    logger.log_stage(
        request_id,
        "tracks_assigned",
        counts={"tracks": len(tracks), "assigned": len(assignment)},
    )

    # STEP 5: Planes
    edge_points = []
    for fa in frames:
        edge_points.extend(extract_edge_points(fa, registry.local_to_global(fa.frame_index), config.edges))
    solver_cfg = config.solver.model_copy(update={"seed": result.seed})
    solved = optimize(
        PlaneSet.initial(registry.classes, hosts), tracks, assignment, edge_points, cameras, solver_cfg, request_id
    )
    result.planes = solved.planes
    result.iterations = solved.iterations
    result.final_loss = solved.final_loss
    result.unconstrained = solved.unconstrained
    result.loss_curve = solved.loss_curve

    # STEP 6: Extent and mesh
    start = time.time()
    extents = build_extents(frames, registry, solved.planes, cameras, solved.optimized_ids, config.extent)
    if config.extent.refine:
        extents = refine(extents, neighbor_pairs(edge_points), config.extent, request_id)
    attached = {d: h for d, h in hosts.items() if h in extents}
    extents, openings = attach_doors_windows(extents, frames, registry, attached, cameras, config.extent)
    mesh, failed = triangulate(extents, openings, attached, skip_failures=True)
    result.mesh = mesh
    result.failed_triangulation = failed
    logger.log_stage(
        request_id,
        "extent_built",
        counts={
            "extents": len(extents),
            "openings": len(openings),
            "triangles": int(len(mesh.triangles)),
            "failed": len(failed),
        },
        latency_ms=(time.time() - start) * 1000,
    )

    # STEP 7: Score
    report = reprojection_iou(mesh, frames, cameras, registry)
    result.iou_report = report
    result.mean_iou = report.mean_iou
    result.frame_mean_iou = report.frame_mean_iou


def run_once(
    scene: SceneBundle,
    source: TrackSource,
    config: PipelineConfig,
    run_index: int,
    seed: int,
    request_id: str,
) -> RunResult:
    """One seeded run; errors are recorded on the result, never raised."""
    logger = LayoutLogger()
    run_id = f"{request_id}:{run_index}"
    result = RunResult(run_index=run_index, seed=seed)
    start = time.time()
    try:
        _reconstruct_run(scene, source, config, result, run_id)
    except _RUN_ERRORS as e:
        result.error_type = type(e).__name__
        result.error_message = str(e)
        result.mean_iou = 0.0
        result.frame_mean_iou = 0.0
        logger.log_error(run_id, type(e).__name__, str(e), traceback.format_exc())
    logger.log_run(
        request_id,
        run_index,
        seed,
        result.mean_iou,
        result.iterations,
        result.final_loss,
        latency_ms=(time.time() - start) * 1000,
        error_type=result.error_type,
    )
    return result


def _run_task(scene, source, config, request_id, task):
    run_index, seed = task
    return run_once(scene, source, config, run_index, seed, request_id)


# ----------------------------------------------------------------------------
# Scene
# ----------------------------------------------------------------------------

def reconstruct(
    scene: SceneBundle,
    config: Optional[PipelineConfig] = None,
    runs: Optional[int] = None,
    base_seed: int = 0,
    jobs: int = 1,
    request_id: Optional[str] = None,
    use_oracle: bool = False,
) -> ReconstructionResult:
    """
    Reconstruct a scene with `runs` independent runs and keep the best.

    Args:
        scene: Validated or raw scene bundle (validated here, before any run).
        config: Pipeline configuration (defaults when omitted).
        runs: Run count; defaults to config.qc.runs.
        base_seed: Run r uses seed base_seed + r.
        jobs: Worker processes; results are gathered in run order.
        request_id: Scene-level id shared by every log entry.
        use_oracle: Prefer ground-truth motion over tracks.json.

    Raises:
        SceneValidationError: bundle is inconsistent or has no track source.
        AllRunsFailedError: every run raised.
    """
    config = config or PipelineConfig()
    logger = LayoutLogger()
    request_id = request_id or logger.generate_request_id()
    runs = config.qc.runs if runs is None else runs
    if runs < 1:
        raise ValueError("runs must be at least 1")

    validate_scene(scene)
    source = make_track_source(scene, config, use_oracle)
    tasks = [(i, base_seed + i) for i in range(runs)]
    logger.log(
        request_id,
        "reconstruction_started",
        context={"scene": scene.scene_id, "runs": runs, "base_seed": base_seed, "jobs": jobs},
    )

    worker = functools.partial(_run_task, scene, source, config, request_id)
    if jobs > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, runs)) as pool:
            results = list(pool.map(worker, tasks))
    else:
        results = [worker(task) for task in tasks]

    if all(r.failed for r in results):
        raise AllRunsFailedError(
            f"scene '{scene.scene_id}': all runs failed",
            errors=[f"run {r.run_index}: {r.error_type}: {r.error_message}" for r in results],
        )

    decision = select_best_run([None if r.failed else r.mean_iou for r in results], config.qc, request_id)
    if results[decision.best_index].failed:
        # All successful runs scored 0 too; prefer one that produced a mesh.
        index = next(i for i, r in enumerate(results) if not r.failed)
        decision = replace(decision, best_index=index)

    result = ReconstructionResult(scene_id=scene.scene_id, runs=results, decision=decision, config=config)
    if scene.depth:
        try:
            result.depth_error = depth_error(result.mesh, scene.cameras, scene.depth, visible_masks(scene.frames))
        except NoValidPixelsError as e:
            logger.log_warning(request_id, str(e), event_type="depth_error_skipped")
    return result


def write_outputs(result: ReconstructionResult, out_dir: str) -> Dict[str, str]:
    """Write mesh, planes, registry and report; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in (MESH_PLY, MESH_OBJ, REPORT_FILE, PLANES_FILE, REGISTRY_FILE)}
    write_ply(result.mesh, paths[MESH_PLY])
    write_obj(result.mesh, paths[MESH_OBJ])
    write_json(paths[PLANES_FILE], result.planes.to_records())
    write_json(paths[REGISTRY_FILE], result.registry.to_records())
    write_json(paths[REPORT_FILE], result.report())
    return paths


# ----------------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------------

def best_of_prefixes(
    run_results: Sequence[Union[RunResult, Optional[float]]],
    counts: Sequence[int],
) -> Dict[int, float]:
    """Best-of-R IoU over the first R runs, for each R in counts."""
    scores = []
    for r in run_results:
        if isinstance(r, RunResult):
            scores.append(0.0 if r.failed else r.mean_iou)
        else:
            scores.append(0.0 if r is None else float(r))
    out = {}
    for count in counts:
        if not 1 <= count <= len(scores):
            raise ValueError(f"prefix length {count} outside 1..{len(scores)}")
        out[int(count)] = max(scores[:count])
    return out


def run_ablation(
    scene: SceneBundle,
    variants: Sequence[str] = tuple(ABLATIONS),
    config: Optional[PipelineConfig] = None,
    runs: Optional[int] = None,
    base_seed: int = 0,
    jobs: int = 1,
    request_id: Optional[str] = None,
    use_oracle: bool = False,
) -> Dict[str, Dict[str, Any]]:
    """
    Reconstruct one scene once per loss variant with the same seeds.

    A variant whose runs all fail is reported with IoU 0 and its error type.
    """
    config = config or PipelineConfig()
    request_id = request_id or LayoutLogger.generate_request_id()
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation variants {unknown}; expected one of {sorted(ABLATIONS)}")

    summary: Dict[str, Dict[str, Any]] = {}
    for name in variants:
        variant_cfg = config.with_overrides({"solver": ABLATIONS[name]})
        try:
            result = reconstruct(scene, variant_cfg, runs, base_seed, jobs, f"{request_id}:{name}", use_oracle)
        except AllRunsFailedError as e:
            summary[name] = {"mean_iou": 0.0, "depth_error": None, "accepted": False, "error": type(e).__name__}
            continue
        summary[name] = {
            "mean_iou": result.best.mean_iou,
            "depth_error": result.depth_error,
            "accepted": result.accepted,
            "error": None,
        }
    return summary
