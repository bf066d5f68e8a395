"""
Tracking - Point sampling, track building, cross-frame element
correspondence and track-to-element assignment.

Global element ids are assigned by chaining optimal matchings between
consecutive annotated frames, with older frames and same-class history as
fallbacks; each track then takes the global id its point falls into most
often across the annotated frames it touches.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely
from scipy.optimize import linear_sum_assignment
from scipy.stats import qmc

from roomlayout.annotations import FrameAnnotation, StructuralClass
from roomlayout.config.models import SamplerConfig, TrackingConfig
from roomlayout.exceptions import EmptyVisibleError, TrackSourceError
from roomlayout.track_sources import TrackSource
from utils.logger import technical_trace

# Sobol draws stop here even if the acceptance rate is tiny.
_MAX_SOBOL_DRAWS = 1 << 22

Sample = Tuple[np.ndarray, int]
TrackAssignment = Dict[int, int]


@dataclass
class PointTrack:
    track_id: int
    points: Dict[int, np.ndarray] = field(default_factory=dict)
    origin_frame: int = -1

    def __len__(self) -> int:
        return len(self.points)

    @property
    def frames(self) -> List[int]:
        return sorted(self.points)


@dataclass
class ElementRegistry:
    """(frame_index, local_id) -> global id, plus the class of every global id."""

    mapping: Dict[Tuple[int, int], int] = field(default_factory=dict)
    classes: Dict[int, StructuralClass] = field(default_factory=dict)

    def global_id(self, frame_index: int, local_id: int) -> int:
        return self.mapping[(frame_index, local_id)]

    def local_to_global(self, frame_index: int) -> Dict[int, int]:
        return {lid: gid for (fi, lid), gid in self.mapping.items() if fi == frame_index}

    @property
    def element_ids(self) -> List[int]:
        return sorted(self.classes)

    def to_records(self) -> dict:
        return {
            "elements": [
                {"global_id": gid, "class": self.classes[gid].value} for gid in self.element_ids
            ],
            "mapping": [
                {"frame_index": fi, "local_id": lid, "global_id": gid}
                for (fi, lid), gid in sorted(self.mapping.items())
            ],
        }

    @classmethod
    def from_records(cls, data: dict) -> "ElementRegistry":
        reg = cls()
        for e in data["elements"]:
            reg.classes[int(e["global_id"])] = StructuralClass(e["class"])
        for m in data["mapping"]:
            reg.mapping[(int(m["frame_index"]), int(m["local_id"]))] = int(m["global_id"])
        return reg


# ----------------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------------

def _image_box(fa: FrameAnnotation):
    w, h = fa.image_size
    return shapely.box(-0.5, -0.5, w - 0.5, h - 0.5)


def sample_points(fa: FrameAnnotation, cfg: Optional[SamplerConfig] = None) -> List[Sample]:
    """
    Scrambled-Sobol points on the visible parts of a frame.

    Count = round(visible area / spacing^2); points outside every visible
    polygon are rejected. Returns (pixel, local_id) pairs.
    """
    cfg = cfg or SamplerConfig()
    box = _image_box(fa)
    regions = [(e.local_id, e.visible.intersection(box)) for e in fa.elements if not e.visible.is_empty]
    regions = [(lid, g) for lid, g in regions if g.area > 0]
    if not regions:
        raise EmptyVisibleError(f"frame {fa.frame_index} has no visible area")
    visible = shapely.union_all([g for _, g in regions])
    count = int(round(visible.area / cfg.target_spacing ** 2))
    if count == 0:
        raise EmptyVisibleError(
            f"frame {fa.frame_index}: visible area {visible.area:.1f} px^2 yields no samples"
        )

    w, h = fa.image_size
    sampler = qmc.Sobol(d=2, scramble=True, seed=np.random.default_rng((cfg.seed, fa.frame_index)))
    ratio = box.area / visible.area
    m = max(4, math.ceil(math.log2(count * ratio * 1.25)))
    batch = sampler.random_base2(m)
    accepted: List[Sample] = []
    drawn = 0
    while True:
        drawn += len(batch)
        xs = batch[:, 0] * w - 0.5
        ys = batch[:, 1] * h - 0.5
        label = np.full(len(batch), -1)
        for lid, geom in regions:
            hit = (label < 0) & shapely.contains_xy(geom, xs, ys)
            label[hit] = lid
        for i in np.flatnonzero(label >= 0):
            accepted.append((np.array([xs[i], ys[i]]), int(label[i])))
            if len(accepted) == count:
                return accepted
        if drawn >= _MAX_SOBOL_DRAWS:
            return accepted
        batch = sampler.random(len(batch))


# ----------------------------------------------------------------------------
# Track building
# ----------------------------------------------------------------------------

def _inside_image(pts: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    w, h = image_size
    return (
        np.isfinite(pts).all(axis=1)
        & (pts[:, 0] >= -0.5) & (pts[:, 0] <= w - 0.5)
        & (pts[:, 1] >= -0.5) & (pts[:, 1] <= h - 0.5)
    )


@technical_trace
def build_tracks(
    samples: Mapping[int, Sequence[Sample]],
    track_source: TrackSource,
    image_size: Tuple[int, int],
) -> List[PointTrack]:
    """
    Extend every sample forward and backward through consecutive frames.

    A point stops at loss of track or when it leaves the image. A missing
    frame pair between the first and last annotated frame is an error;
    outside that range the track simply ends.
    """
    frames = track_source.frames
    position = {f: i for i, f in enumerate(frames)}
    annotated = sorted(samples)
    lo, hi = (annotated[0], annotated[-1]) if annotated else (0, -1)

    tracks: List[PointTrack] = []
    next_id = 0
    for origin in annotated:
        frame_samples = samples[origin]
        if not frame_samples:
            continue
        if origin not in position:
            raise TrackSourceError(f"annotated frame {origin} unknown to the track source")
        start = np.array([p for p, _ in frame_samples], dtype=np.float64)
        batch = [PointTrack(track_id=next_id + i, origin_frame=origin) for i in range(len(start))]
        next_id += len(start)
        for t, p in zip(batch, start):
            t.points[origin] = p.copy()

        for step in (1, -1):
            cur_frame = origin
            cur_pts = start.copy()
            active = np.arange(len(start))
            k = position[origin] + step
            while len(active) and 0 <= k < len(frames):
                nxt = frames[k]
                if not track_source.covers(cur_frame, nxt):
                    if lo <= min(cur_frame, nxt) and max(cur_frame, nxt) <= hi:
                        raise TrackSourceError("no track data", frame_pair=(cur_frame, nxt))
                    break
                moved, alive = track_source.advance(cur_frame, nxt, cur_pts)
                alive = alive & _inside_image(moved, image_size)
                active, cur_pts = active[alive], moved[alive]
                observed = track_source.observe(origin, nxt, cur_pts)
                for ti, p in zip(active, observed):
                    batch[ti].points[nxt] = p
                cur_frame = nxt
                k += step
        tracks.extend(t for t in batch if len(t) >= 2)
    return tracks


# ----------------------------------------------------------------------------
# Correspondence
# ----------------------------------------------------------------------------

def element_labels(fa: FrameAnnotation, pts: np.ndarray) -> List[Optional[int]]:
    """Local id of the smallest amodal region containing each point (or None)."""
    pts = np.atleast_2d(pts)
    best_area = np.full(len(pts), np.inf)
    labels: List[Optional[int]] = [None] * len(pts)
    for e in fa.elements:
        inside = shapely.contains_xy(e.amodal, pts[:, 0], pts[:, 1])
        area = e.amodal.area
        for i in np.flatnonzero(inside & (area < best_area)):
            best_area[i] = area
            labels[i] = e.local_id
    return labels


def best_matching(counts: np.ndarray) -> List[Tuple[int, int]]:
    """Row/column pairs maximising the total count; zero-count pairs dropped."""
    counts = np.asarray(counts)
    if counts.size == 0:
        return []
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if counts[r, c] > 0]


def _co_occurrence(
    fa: FrameAnnotation,
    fb: FrameAnnotation,
    tracks: Sequence[PointTrack],
) -> np.ndarray:
    ids_a, ids_b = fa.local_ids, fb.local_ids
    row = {lid: i for i, lid in enumerate(ids_a)}
    col = {lid: j for j, lid in enumerate(ids_b)}
    counts = np.zeros((len(ids_a), len(ids_b)), dtype=np.int64)
    both = [t for t in tracks if fa.frame_index in t.points and fb.frame_index in t.points]
    if not both:
        return counts
    la = element_labels(fa, np.array([t.points[fa.frame_index] for t in both]))
    lb = element_labels(fb, np.array([t.points[fb.frame_index] for t in both]))
    for a, b in zip(la, lb):
        if a is not None and b is not None:
            counts[row[a], col[b]] += 1
    # Never match across classes.
    for i, lid_a in enumerate(ids_a):
        for j, lid_b in enumerate(ids_b):
            if fa.element(lid_a).cls != fb.element(lid_b).cls:
                counts[i, j] = 0
    return counts


def _track_support(fa: FrameAnnotation, tracks: Sequence[PointTrack]) -> Counter:
    """Number of track points landing in each element of a frame."""
    seen = [t.points[fa.frame_index] for t in tracks if fa.frame_index in t.points]
    if not seen:
        return Counter()
    return Counter(lid for lid in element_labels(fa, np.array(seen)) if lid is not None)


def _image_proximity(a, b) -> Tuple[float, float]:
    """Sort key: image distance first, then larger overlap."""
    return a.distance(b), -a.intersection(b).area


@technical_trace
def match_elements(
    annotated_frames: Sequence[FrameAnnotation],
    tracks: Sequence[PointTrack],
) -> ElementRegistry:
    """
    Chain optimal element matchings over consecutive annotated frames.

    Elements the chain leaves unmatched are matched against older annotated
    frames through the tracks they share. An element no track lands in
    (a sliver too small to receive samples) inherits an id from the most
    recent earlier frame where its class had track support: the free
    same-class element nearest to it in the image. Everything else gets a
    fresh id.
    """
    frames = sorted(annotated_frames, key=lambda f: f.frame_index)
    registry = ElementRegistry()
    next_id = 0

    def fresh(fa: FrameAnnotation, local_id: int) -> None:
        nonlocal next_id
        registry.mapping[(fa.frame_index, local_id)] = next_id
        registry.classes[next_id] = fa.element(local_id).cls
        next_id += 1

    def link(fa: FrameAnnotation, local_id: int, fb: FrameAnnotation, target: int) -> int:
        gid = registry.global_id(fa.frame_index, local_id)
        registry.mapping[(fb.frame_index, target)] = gid
        return gid

    if not frames:
        return registry
    support = {fa.frame_index: _track_support(fa, tracks) for fa in frames}
    for lid in frames[0].local_ids:
        fresh(frames[0], lid)

    for k in range(1, len(frames)):
        fa, fb = frames[k - 1], frames[k]
        claimed = set()
        for i, j in best_matching(_co_occurrence(fa, fb, tracks)):
            claimed.add(link(fa, fa.local_ids[i], fb, fb.local_ids[j]))

        for older in reversed(frames[:k - 1]):
            cols = [
                j for j, lid in enumerate(fb.local_ids)
                if (fb.frame_index, lid) not in registry.mapping and support[fb.frame_index][lid]
            ]
            if not cols:
                break
            rows = [
                i for i, lid in enumerate(older.local_ids)
                if registry.global_id(older.frame_index, lid) not in claimed
            ]
            counts = _co_occurrence(older, fb, tracks)[np.ix_(rows, cols)]
            for i, j in best_matching(counts):
                claimed.add(link(older, older.local_ids[rows[i]], fb, fb.local_ids[cols[j]]))

        for lid in fb.local_ids:
            if (fb.frame_index, lid) in registry.mapping:
                continue
            sliver = fb.element(lid)
            if support[fb.frame_index][lid] == 0:
                for prev in reversed(frames[:k]):
                    peers = [
                        p for p in prev.local_ids
                        if prev.element(p).cls == sliver.cls and support[prev.frame_index][p]
                    ]
                    if not peers:
                        continue
                    free = [p for p in peers if registry.global_id(prev.frame_index, p) not in claimed]
                    if free:
                        nearest = min(free, key=lambda p: _image_proximity(sliver.amodal, prev.element(p).amodal))
                        claimed.add(link(prev, nearest, fb, lid))
                    break
            if (fb.frame_index, lid) not in registry.mapping:
                fresh(fb, lid)
    return registry


@technical_trace
def assign_tracks(
    tracks: Sequence[PointTrack],
    registry: ElementRegistry,
    annotated_frames: Sequence[FrameAnnotation],
    cfg: Optional[TrackingConfig] = None,
) -> TrackAssignment:
    """
    Majority vote of amodal containment over the annotated frames a track
    touches. Ties go to the label seen first; tracks whose winning label
    holds no more than `consistency_threshold` of the votes are dropped.
    """
    cfg = cfg or TrackingConfig()
    frames = sorted(annotated_frames, key=lambda f: f.frame_index)
    votes: Dict[int, List[Optional[int]]] = {t.track_id: [] for t in tracks}
    for fa in frames:
        touching = [t for t in tracks if fa.frame_index in t.points]
        if not touching:
            continue
        labels = element_labels(fa, np.array([t.points[fa.frame_index] for t in touching]))
        for t, lid in zip(touching, labels):
            gid = None if lid is None else registry.mapping.get((fa.frame_index, lid))
            votes[t.track_id].append(gid)

    assignment: TrackAssignment = {}
    for track_id, labels in votes.items():
        tally = Counter(g for g in labels if g is not None)
        if not tally:
            continue
        top = max(tally.values())
        winner = next(g for g in labels if g is not None and tally[g] == top)
        if top / len(labels) > cfg.consistency_threshold:
            assignment[track_id] = winner
    return assignment
