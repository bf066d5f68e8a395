"""
Losses - Track consistency, edge agreement and perpendicularity terms with
analytic gradients.

Parameters are a raw (P, 4) array: row p = (m, e) for plane m.X + e = 0,
not necessarily normalised. Unprojection of a ray (o, r) with |r| = 1 is
    s = -(m.o + e) / (m.r),   X = o + s r
so every term depends only on the direction of each 4-vector, and
    ds/d(m, e) = -[X, 1] / (m.r).
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from roomlayout.geometry import MAX_DEPTH, PARALLEL_EPS


@dataclass(frozen=True)
class TrackObservations:
    """Every (track, frame) ray, flattened."""

    plane_index: np.ndarray  # (N,) int
    track_index: np.ndarray  # (N,) int, 0..n_tracks-1
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3) unit
    n_tracks: int

    @classmethod
    def empty(cls) -> "TrackObservations":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 3)), 0)


@dataclass(frozen=True)
class EdgeObservations:
    """One ray per edge point, unprojected onto two planes."""

    plane_a: np.ndarray  # (K,) int
    plane_b: np.ndarray  # (K,) int
    origins: np.ndarray  # (K, 3)
    directions: np.ndarray  # (K, 3) unit

    @classmethod
    def empty(cls) -> "EdgeObservations":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass(frozen=True)
class TermResult:
    value: float
    grad: np.ndarray
    valid: int
    skipped: int = 0
    plane_hits: np.ndarray = None


def intersect(theta: np.ndarray, plane_index: np.ndarray, origins: np.ndarray, directions: np.ndarray):
    """
    Vectorised ray/plane intersection.

    Returns:
        (points (N, 3), denom (N,) = m.r, valid (N,) bool)
    """
    m = theta[plane_index, :3]
    e = theta[plane_index, 3]
    denom = np.einsum("ij,ij->i", m, directions)
    numer = -(np.einsum("ij,ij->i", m, origins) + e)
    norm = np.linalg.norm(m, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = numer / denom
    valid = (np.abs(denom) > PARALLEL_EPS * norm) & (s > 0.0) & (s <= MAX_DEPTH) & np.isfinite(s)
    s = np.where(valid, s, 0.0)
    return origins + s[:, None] * directions, denom, valid


def _accumulate(n_planes: int, plane_index: np.ndarray, coeff: np.ndarray, points: np.ndarray, denom: np.ndarray) -> np.ndarray:
    """Sum coeff * ds/d(m, e) per plane."""
    grad = np.zeros((n_planes, 4))
    scale = -coeff / denom
    np.add.at(grad[:, :3], plane_index, scale[:, None] * points)
    np.add.at(grad[:, 3], plane_index, scale)
    return grad


def track_loss(theta: np.ndarray, obs: TrackObservations) -> TermResult:
    """
    Mean over tracks of the mean distance between each unprojection and the
    track's mean unprojection. Invalid rays are left out of their track for
    this evaluation; tracks with fewer than two valid rays are skipped.
    """
    n_planes = len(theta)
    grad = np.zeros((n_planes, 4))
    if obs.n_tracks == 0 or len(obs.plane_index) == 0:
        return TermResult(0.0, grad, 0)

    X, denom, valid = intersect(theta, obs.plane_index, obs.origins, obs.directions)
    counts = np.bincount(obs.track_index[valid], minlength=obs.n_tracks)
    usable = counts >= 2
    keep = valid & usable[obs.track_index]
    n_valid = int(usable.sum())
    if n_valid == 0:
        return TermResult(0.0, grad, 0, skipped=obs.n_tracks)

    ti = obs.track_index[keep]
    Xk = X[keep]
    n_t = counts[ti].astype(np.float64)
    mean = np.zeros((obs.n_tracks, 3))
    np.add.at(mean, ti, Xk)
    mean[usable] /= counts[usable, None]

    diff = Xk - mean[ti]
    dist = np.linalg.norm(diff, axis=1)
    per_track = np.bincount(ti, weights=dist / n_t, minlength=obs.n_tracks)
    value = float(per_track[usable].sum() / n_valid)

    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    u_mean = np.zeros((obs.n_tracks, 3))
    np.add.at(u_mean, ti, u)
    u_mean[usable] /= counts[usable, None]
    g = u - u_mean[ti]
    coeff = np.einsum("ij,ij->i", g, obs.directions[keep]) / (n_t * n_valid)
    grad = _accumulate(n_planes, obs.plane_index[keep], coeff, Xk, denom[keep])
    hits = np.bincount(obs.plane_index[keep], minlength=n_planes)
    return TermResult(value, grad, n_valid, skipped=obs.n_tracks - n_valid, plane_hits=hits)


def edge_loss(theta: np.ndarray, obs: EdgeObservations) -> TermResult:
    """Mean distance between the two unprojections of each edge point."""
    n_planes = len(theta)
    grad = np.zeros((n_planes, 4))
    k = len(obs.plane_a)
    if k == 0:
        return TermResult(0.0, grad, 0)

    Xa, da, va = intersect(theta, obs.plane_a, obs.origins, obs.directions)
    Xb, db, vb = intersect(theta, obs.plane_b, obs.origins, obs.directions)
    ok = va & vb
    n_valid = int(ok.sum())
    if n_valid == 0:
        return TermResult(0.0, grad, 0, skipped=k)

    diff = Xa[ok] - Xb[ok]
    dist = np.linalg.norm(diff, axis=1)
    value = float(dist.sum() / n_valid)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
    wr = np.einsum("ij,ij->i", w, obs.directions[ok]) / n_valid
    grad = _accumulate(n_planes, obs.plane_a[ok], wr, Xa[ok], da[ok])
    grad -= _accumulate(n_planes, obs.plane_b[ok], wr, Xb[ok], db[ok])
    hits = np.bincount(obs.plane_a[ok], minlength=n_planes) + np.bincount(obs.plane_b[ok], minlength=n_planes)
    return TermResult(value, grad, n_valid, skipped=k - n_valid, plane_hits=hits)


def perp_loss(theta: np.ndarray, pairs: np.ndarray) -> TermResult:
    """Mean |cos| between the normals of each (wall, floor/ceiling) pair."""
    n_planes = len(theta)
    grad = np.zeros((n_planes, 4))
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if len(pairs) == 0:
        return TermResult(0.0, grad, 0)

    m = theta[:, :3]
    norm = np.linalg.norm(m, axis=1)
    n = m / norm[:, None]
    w, c = pairs[:, 0], pairs[:, 1]
    cos = np.einsum("ij,ij->i", n[w], n[c])
    value = float(np.abs(cos).mean())

    sign = np.sign(cos) / len(pairs)
    gw = sign[:, None] * (n[c] - cos[:, None] * n[w]) / norm[w, None]
    gc = sign[:, None] * (n[w] - cos[:, None] * n[c]) / norm[c, None]
    np.add.at(grad[:, :3], w, gw)
    np.add.at(grad[:, :3], c, gc)
    return TermResult(value, grad, len(pairs))


def normalize_rows(theta: np.ndarray) -> np.ndarray:
    """Scale each plane 4-vector so its normal part has unit length."""
    return theta / np.linalg.norm(theta[:, :3], axis=1, keepdims=True)


def joint_loss(
    theta: np.ndarray,
    tracks: TrackObservations,
    edges: EdgeObservations,
    pairs: np.ndarray,
    alpha_edge: float,
    alpha_perp: float,
    use_track: bool = True,
    use_edge: bool = True,
    use_perp: bool = True,
) -> Tuple[float, np.ndarray, dict]:
    """tracks + alpha_edge * edges + alpha_perp * perp, disabled terms left out."""
    total = 0.0
    grad = np.zeros_like(theta)
    terms = {}
    stats = {}
    hits = np.zeros(len(theta), dtype=np.int64)
    if use_track:
        t = track_loss(theta, tracks)
        total += t.value
        grad += t.grad
        terms["tracks"] = t.value
        stats["valid_tracks"] = t.valid
        if t.plane_hits is not None:
            hits += t.plane_hits
    if use_edge:
        e = edge_loss(theta, edges)
        total += alpha_edge * e.value
        grad += alpha_edge * e.grad
        terms["edges"] = e.value
        stats["skipped_edge_points"] = e.skipped
        if e.plane_hits is not None:
            hits += e.plane_hits
    if use_perp:
        p = perp_loss(theta, pairs)
        total += alpha_perp * p.value
        grad += alpha_perp * p.grad
        terms["perp"] = p.value
    stats["terms"] = terms
    stats["plane_hits"] = hits
    return total, grad, stats
