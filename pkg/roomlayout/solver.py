"""
Solver - Joint ADAM optimisation of all plane equations.

    loss = tracks + alpha_edge * edges + alpha_perp * perp

Planes start as (1, 1, 1, 1) normalised and are renormalised after every
step. Doors and windows have no plane of their own; they alias their host.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from roomlayout.annotations import EdgePoint, StructuralClass
from roomlayout.config.models import SolverConfig
from roomlayout.exceptions import (
    AllTracksDegenerateError,
    DivergedError,
    UnconstrainedPlaneError,
)
from roomlayout.geometry import CameraFrame, Plane, pixel_directions
from roomlayout.losses import (
    EdgeObservations,
    TrackObservations,
    edge_loss,
    joint_loss,
    normalize_rows,
    perp_loss,
    track_loss,
)
from roomlayout.tracking import PointTrack, TrackAssignment
from utils.logger import LayoutLogger, technical_trace

_VERTICAL_CLASSES = (StructuralClass.WALL,)
_HORIZONTAL_CLASSES = (StructuralClass.FLOOR, StructuralClass.CEILING)


@dataclass
class PlaneSet:
    """One plane per structural element; openings alias their host."""

    planes: Dict[int, Plane]
    classes: Dict[int, StructuralClass]
    hosts: Dict[int, int] = field(default_factory=dict)

    @classmethod
    def initial(cls, classes: Mapping[int, StructuralClass], hosts: Optional[Mapping[int, int]] = None) -> "PlaneSet":
        hosts = dict(hosts or {})
        planes = {
            gid: Plane.from_vector(np.ones(4), element_id=gid)
            for gid, c in sorted(classes.items())
            if not c.is_opening
        }
        return cls(planes=planes, classes=dict(classes), hosts=hosts)

    @property
    def plane_ids(self) -> List[int]:
        return sorted(self.planes)

    def owner(self, element_id: int) -> Optional[int]:
        """Id of the element whose plane `element_id` uses (None for a hostless opening)."""
        if element_id in self.planes:
            return element_id
        host = self.hosts.get(element_id)
        return host if host in self.planes else None

    def plane_of(self, element_id: int) -> Plane:
        owner = self.owner(element_id)
        if owner is None:
            raise KeyError(f"element {element_id} has no plane")
        return self.planes[owner]

    def theta(self, ids: Optional[Sequence[int]] = None) -> np.ndarray:
        ids = self.plane_ids if ids is None else ids
        return np.array([self.planes[i].as_vector() for i in ids])

    def with_theta(self, ids: Sequence[int], theta: np.ndarray) -> "PlaneSet":
        planes = dict(self.planes)
        for gid, row in zip(ids, theta):
            planes[gid] = Plane.from_vector(row, element_id=gid)
        return PlaneSet(planes=planes, classes=dict(self.classes), hosts=dict(self.hosts))

    def to_records(self) -> List[dict]:
        records = []
        for gid in sorted(self.classes):
            owner = self.owner(gid)
            rec = {"element_id": gid, "class": self.classes[gid].value, "host": self.hosts.get(gid)}
            if owner is not None:
                p = self.planes[owner]
                rec["normal"] = [float(x) for x in p.normal]
                rec["offset"] = float(p.offset)
            records.append(rec)
        return records

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "PlaneSet":
        planes, classes, hosts = {}, {}, {}
        for rec in records:
            gid = int(rec["element_id"])
            classes[gid] = StructuralClass(rec["class"])
            if rec.get("host") is not None:
                hosts[gid] = int(rec["host"])
            elif "normal" in rec:
                planes[gid] = Plane(normal=rec["normal"], offset=rec["offset"], element_id=gid)
        return cls(planes=planes, classes=classes, hosts=hosts)


def perpendicular_pairs(plane_set: PlaneSet, ids: Optional[Sequence[int]] = None) -> List[Tuple[int, int]]:
    """Every (wall, floor-or-ceiling) pair among the given plane ids; Slanted never appears."""
    ids = plane_set.plane_ids if ids is None else list(ids)
    walls = [i for i in ids if plane_set.classes[i] in _VERTICAL_CLASSES]
    flats = [i for i in ids if plane_set.classes[i] in _HORIZONTAL_CLASSES]
    return [(w, c) for w in walls for c in flats]


# ----------------------------------------------------------------------------
# Loss inputs
# ----------------------------------------------------------------------------

def _rays(cameras: Mapping[int, CameraFrame], frame_ids: np.ndarray, pixels: np.ndarray):
    origins = np.zeros((len(frame_ids), 3))
    dirs = np.zeros((len(frame_ids), 3))
    for f in np.unique(frame_ids):
        rows = frame_ids == f
        cam = cameras[int(f)]
        origins[rows] = cam.center
        dirs[rows] = pixel_directions(cam, pixels[rows])
    return origins, dirs


def track_observations(
    tracks: Sequence[PointTrack],
    assignment: TrackAssignment,
    cameras: Mapping[int, CameraFrame],
    row_of: Mapping[int, int],
    plane_set: PlaneSet,
) -> TrackObservations:
    """Flatten assigned tracks into rays against their plane rows."""
    plane_index, track_index, frame_ids, pixels = [], [], [], []
    t_index = 0
    for t in tracks:
        gid = assignment.get(t.track_id)
        if gid is None:
            continue
        owner = plane_set.owner(gid)
        if owner is None or owner not in row_of:
            continue
        frames = [f for f in t.frames if f in cameras]
        if len(frames) < 2:
            continue
        for f in frames:
            plane_index.append(row_of[owner])
            track_index.append(t_index)
            frame_ids.append(f)
            pixels.append(t.points[f])
        t_index += 1
    if not plane_index:
        return TrackObservations.empty()
    origins, dirs = _rays(cameras, np.array(frame_ids), np.array(pixels, dtype=np.float64))
    return TrackObservations(
        plane_index=np.array(plane_index),
        track_index=np.array(track_index),
        origins=origins,
        directions=dirs,
        n_tracks=t_index,
    )


def edge_observations(
    edge_points: Sequence[EdgePoint],
    cameras: Mapping[int, CameraFrame],
    row_of: Mapping[int, int],
    plane_set: PlaneSet,
) -> EdgeObservations:
    a, b, frame_ids, pixels = [], [], [], []
    for ep in edge_points:
        oa, ob = plane_set.owner(ep.element_a), plane_set.owner(ep.element_b)
        if oa not in row_of or ob not in row_of or ep.frame_index not in cameras:
            continue
        a.append(row_of[oa])
        b.append(row_of[ob])
        frame_ids.append(ep.frame_index)
        pixels.append(ep.pixel)
    if not a:
        return EdgeObservations.empty()
    origins, dirs = _rays(cameras, np.array(frame_ids), np.array(pixels, dtype=np.float64))
    return EdgeObservations(np.array(a), np.array(b), origins, dirs)


def _rows(plane_set: PlaneSet) -> Dict[int, int]:
    return {gid: i for i, gid in enumerate(plane_set.plane_ids)}


def _camera_map(cameras) -> Dict[int, CameraFrame]:
    if isinstance(cameras, Mapping):
        return dict(cameras)
    return {c.frame_index: c for c in cameras}


def loss_tracks(planes: PlaneSet, tracks, assignment: TrackAssignment, cameras) -> float:
    """Track consistency loss at the given planes."""
    rows = _rows(planes)
    obs = track_observations(tracks, assignment, _camera_map(cameras), rows, planes)
    result = track_loss(planes.theta(), obs)
    if result.valid == 0:
        raise AllTracksDegenerateError("no track has two or more valid unprojections")
    return result.value


def loss_edges(planes: PlaneSet, edge_points, cameras) -> float:
    """Edge agreement loss at the given planes (0 without edge points)."""
    rows = _rows(planes)
    obs = edge_observations(edge_points, _camera_map(cameras), rows, planes)
    return edge_loss(planes.theta(), obs).value


def loss_perp(planes: PlaneSet, pairs: Sequence[Tuple[int, int]]) -> float:
    """Mean |cos| over (wall, floor/ceiling) pairs (0 for no pairs)."""
    rows = _rows(planes)
    idx = np.array([(rows[w], rows[c]) for w, c in pairs], dtype=int).reshape(-1, 2)
    return perp_loss(planes.theta(), idx).value


# ----------------------------------------------------------------------------
# Optimisation
# ----------------------------------------------------------------------------

@dataclass
class OptimizeResult:
    planes: PlaneSet
    final_loss: float
    iterations: int
    unconstrained: List[int] = field(default_factory=list)
    reinitialized: int = 0
    terms: Dict[str, float] = field(default_factory=dict)
    # (iteration, best loss) samples, best loss non-increasing
    loss_curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def optimized_ids(self) -> List[int]:
        return [i for i in self.planes.plane_ids if i not in self.unconstrained]


class _Adam:
    """ADAM with per-row step counters so a reset row restarts its bias correction."""

    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0])

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> None:
        self.t += 1
        bc1 = (1.0 - self.beta1 ** self.t)[:, None]
        bc2 = (1.0 - self.beta2 ** self.t)[:, None]
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grads * grads)
        params -= (lr / bc1) * self.m / (np.sqrt(self.v / bc2) + self.epsilon)

    def reset(self, row: int) -> None:
        self.m[row] = 0.0
        self.v[row] = 0.0
        self.t[row] = 0


def _reinit_row(
    row: int,
    tracks: TrackObservations,
    edges: EdgeObservations,
    rng: np.random.Generator,
    distance: float,
) -> np.ndarray:
    """Fresh plane facing the mean ray of the row's observations, `distance` along it."""
    mask_t = tracks.plane_index == row
    mask_e = (edges.plane_a == row) | (edges.plane_b == row)
    origins = np.vstack([tracks.origins[mask_t], edges.origins[mask_e]])
    dirs = np.vstack([tracks.directions[mask_t], edges.directions[mask_e]])
    mean_dir = dirs.mean(axis=0)
    mean_dir /= np.linalg.norm(mean_dir)
    normal = -mean_dir + 0.5 * rng.normal(size=3)
    normal /= np.linalg.norm(normal)
    if normal @ mean_dir > -0.1:
        normal = -mean_dir
    anchor = origins.mean(axis=0) + distance * mean_dir
    return np.concatenate([normal, [-normal @ anchor]])


@technical_trace
def optimize(
    init: PlaneSet,
    tracks: Sequence[PointTrack],
    assignment: TrackAssignment,
    edge_points: Sequence[EdgePoint],
    cameras,
    cfg: Optional[SolverConfig] = None,
    request_id: Optional[str] = None,
) -> OptimizeResult:
    """
    Minimise the joint loss with ADAM and return the best snapshot.

    Planes with neither tracks nor (enabled) edge points are not optimised;
    they are reported in `unconstrained` and keep their initial value.
    """
    cfg = cfg or SolverConfig()
    logger = LayoutLogger()
    request_id = request_id or logger.generate_request_id()
    cams = _camera_map(cameras)

    all_ids = init.plane_ids
    all_rows = {gid: i for i, gid in enumerate(all_ids)}
    t_all = track_observations(tracks, assignment, cams, all_rows, init) if cfg.use_track_loss else TrackObservations.empty()
    e_all = edge_observations(edge_points, cams, all_rows, init) if cfg.use_edge_loss else EdgeObservations.empty()
    constrained_rows = set(t_all.plane_index.tolist()) | set(e_all.plane_a.tolist()) | set(e_all.plane_b.tolist())
    ids = [gid for gid in all_ids if all_rows[gid] in constrained_rows]
    unconstrained = [gid for gid in all_ids if gid not in ids]
    for gid in unconstrained:
        logger.log_warning(
            request_id,
            str(UnconstrainedPlaneError(gid)),
            event_type="unconstrained_plane",
            context={"element_id": gid},
        )

    if cfg.use_track_loss and t_all.n_tracks == 0:
        raise AllTracksDegenerateError("no assigned track spans two frames")

    rows = {gid: i for i, gid in enumerate(ids)}
    tobs = track_observations(tracks, assignment, cams, rows, init) if cfg.use_track_loss else TrackObservations.empty()
    eobs = edge_observations(edge_points, cams, rows, init) if cfg.use_edge_loss else EdgeObservations.empty()
    pair_idx = np.array(
        [(rows[w], rows[c]) for w, c in perpendicular_pairs(init, ids)], dtype=int
    ).reshape(-1, 2)

    theta = normalize_rows(init.theta(ids)) if ids else np.zeros((0, 4))

    def evaluate(th):
        return joint_loss(
            th, tobs, eobs, pair_idx, cfg.alpha_edge, cfg.alpha_perp,
            use_track=cfg.use_track_loss, use_edge=cfg.use_edge_loss, use_perp=cfg.use_perp_loss,
        )

    logger.log_stage(
        request_id,
        "solver_started",
        counts={
            "planes": len(ids),
            "unconstrained": len(unconstrained),
            "tracks": tobs.n_tracks,
            "track_rays": len(tobs.plane_index),
            "edge_points": len(eobs.plane_a),
            "perp_pairs": len(pair_idx),
        },
    )
    start = time.time()

    if not ids:
        return OptimizeResult(planes=init, final_loss=0.0, iterations=0, unconstrained=unconstrained)

    rng = np.random.default_rng((cfg.seed, 7))
    adam = _Adam(theta.shape)
    lr = cfg.learning_rate
    best_loss = np.inf
    best_theta = theta.copy()
    best_terms: Dict[str, float] = {}
    since_best = 0
    since_decay = 0
    invalid_streak = np.zeros(len(ids), dtype=np.int64)
    reinitialized = 0
    curve: List[Tuple[int, float]] = []
    iterations = 0

    loss, grad, stats = evaluate(theta)
    for it in range(cfg.max_iterations):
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergedError("joint loss became non-finite", iteration=it)

        hits = stats["plane_hits"]
        complete = bool(np.all(hits > 0))
        threshold = best_loss - max(cfg.abs_tolerance, cfg.tolerance * best_loss) if np.isfinite(best_loss) else np.inf
        if complete and loss < threshold:
            best_loss = loss
            best_theta = theta.copy()
            best_terms = dict(stats["terms"])
            since_best = 0
            since_decay = 0
        elif complete:
            since_best += 1
            since_decay += 1
            if since_decay >= cfg.decay_patience and lr > cfg.min_learning_rate:
                lr = max(lr * cfg.lr_decay, cfg.min_learning_rate)
                since_decay = 0
            if since_best >= cfg.patience:
                break

        if it % cfg.log_every == 0:
            curve.append((it, float(best_loss)))
            logger.log_optimizer(request_id, "solver_progress", it, float(loss), float(best_loss), lr, stats["terms"])

        invalid_streak = np.where(hits > 0, 0, invalid_streak + 1)
        for row in np.flatnonzero(invalid_streak > cfg.reinit_after):
            theta[row] = _reinit_row(row, tobs, eobs, rng, cfg.reinit_distance)
            adam.reset(row)
            invalid_streak[row] = 0
            reinitialized += 1
            logger.log(
                request_id,
                "plane_reinitialized",
                severity="WARNING",
                context={"element_id": ids[row], "iteration": it},
            )

        adam.step(theta, grad, lr)
        theta = normalize_rows(theta)
        iterations = it + 1
        loss, grad, stats = evaluate(theta)

    if not np.isfinite(loss):
        raise DivergedError("joint loss became non-finite", iteration=iterations)
    if np.all(stats["plane_hits"] > 0) and loss < best_loss:
        best_loss, best_theta, best_terms = loss, theta.copy(), dict(stats["terms"])
    if not np.isfinite(best_loss):
        # No complete evaluation ever happened; report where we stopped.
        best_loss, best_theta, best_terms = loss, theta.copy(), dict(stats["terms"])
    curve.append((iterations, float(best_loss)))

    result = OptimizeResult(
        planes=init.with_theta(ids, best_theta),
        final_loss=float(best_loss),
        iterations=iterations,
        unconstrained=unconstrained,
        reinitialized=reinitialized,
        terms=best_terms,
        loss_curve=curve,
    )
    logger.log_stage(
        request_id,
        "solver_finished",
        counts={
            "iterations": iterations,
            "reinitialized": reinitialized,
            "best_loss": float(best_loss),
            "learning_rate": lr,
            "terms": best_terms,
        },
        latency_ms=(time.time() - start) * 1000,
    )
    return result
