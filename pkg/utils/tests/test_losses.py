"""
Test suite for the loss terms: known values and analytic gradients checked
against central finite differences.
"""

import numpy as np
import pytest

from roomlayout.losses import (
    EdgeObservations,
    TrackObservations,
    edge_loss,
    intersect,
    joint_loss,
    normalize_rows,
    perp_loss,
    track_loss,
)

CASES = 120
STEP = 1e-6


def _numeric_grad(fn, theta):
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        up, down = theta.copy(), theta.copy()
        up[idx] += STEP
        down[idx] -= STEP
        grad[idx] = (fn(up) - fn(down)) / (2 * STEP)
    return grad


def _unit(v):
    return v / np.linalg.norm(v)


def _random_planes(rng, n, base=None, spread=1.0):
    """Unit planes 3-6 m from the origin, returned with a random non-unit scale."""
    rows = []
    for _ in range(n):
        normal = rng.normal(size=3) if base is None else np.asarray(base) + spread * rng.normal(size=3)
        normal = _unit(normal)
        rows.append(np.append(normal, -rng.uniform(3.0, 6.0)))
    unit = np.array(rows)
    scale = rng.uniform(0.5, 2.0, size=(n, 1)) * rng.choice([-1.0, 1.0], size=(n, 1))
    return unit, unit * scale


def _ray_towards(rng, normals, min_cos=0.3):
    """Unit direction with n.r > min_cos for every given unit normal."""
    centre = _unit(np.sum(normals, axis=0))
    for _ in range(10000):
        r = _unit(centre + 0.6 * rng.normal(size=3))
        if np.all(normals @ r > min_cos):
            return r
    raise AssertionError("could not draw a ray")


def _track_case(rng):
    n_planes = int(rng.integers(1, 5))
    unit, theta = _random_planes(rng, n_planes)
    plane_index, track_index, origins, directions = [], [], [], []
    n_tracks = int(rng.integers(1, 6))
    for t in range(n_tracks):
        p = int(rng.integers(n_planes))
        for _ in range(int(rng.integers(2, 6))):
            plane_index.append(p)
            track_index.append(t)
            origins.append(rng.uniform(-1.0, 1.0, size=3))
            directions.append(_ray_towards(rng, unit[p:p + 1, :3]))
    obs = TrackObservations(
        np.array(plane_index), np.array(track_index), np.array(origins), np.array(directions), n_tracks
    )
    return theta, obs


def _edge_case(rng):
    n_planes = int(rng.integers(2, 5))
    while True:
        unit, theta = _random_planes(rng, n_planes, base=(0.0, 1.0, 0.0), spread=0.7)
        normals = unit[:, :3]
        # Every pair needs a common ray hitting both planes from the front.
        if np.min(normals @ normals.T) > -0.3:
            break
    plane_a, plane_b, origins, directions = [], [], [], []
    for _ in range(int(rng.integers(1, 8))):
        a, b = rng.choice(n_planes, size=2, replace=False)
        plane_a.append(a)
        plane_b.append(b)
        origins.append(rng.uniform(-1.0, 1.0, size=3))
        directions.append(_ray_towards(rng, unit[[a, b], :3]))
    obs = EdgeObservations(np.array(plane_a), np.array(plane_b), np.array(origins), np.array(directions))
    return theta, obs


class TestIntersect:

    def test_valid_hit(self):
        theta = np.array([[0.0, 2.0, 0.0, -10.0]])
        X, denom, valid = intersect(theta, np.array([0]), np.zeros((1, 3)), np.array([[0.0, 1.0, 0.0]]))
        assert valid.tolist() == [True]
        assert np.allclose(X, [[0.0, 5.0, 0.0]])
        assert denom[0] == pytest.approx(2.0)

    def test_parallel_and_behind_are_invalid(self):
        theta = np.array([[0.0, 1.0, 0.0, -5.0]])
        dirs = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        _, _, valid = intersect(theta, np.array([0, 0]), np.zeros((2, 3)), dirs)
        assert valid.tolist() == [False, False]


class TestTrackLoss:
    """Spread of a track's unprojections around their mean."""

    def setup_method(self):
        self.theta = np.array([[0.0, 1.0, 0.0, -5.0]])
        self.origins = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

    def _obs(self, directions):
        return TrackObservations(np.array([0, 0]), np.array([0, 0]), self.origins, np.asarray(directions), 1)

    def test_consistent_track_is_zero(self):
        dirs = [_unit(np.array([0.0, 5.0, 0.0])), _unit(np.array([-1.0, 5.0, 0.0]))]
        result = track_loss(self.theta, self._obs(dirs))
        assert result.value == pytest.approx(0.0, abs=1e-12)
        assert result.valid == 1

    def test_parallel_rays_spread(self):
        result = track_loss(self.theta, self._obs([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]))
        assert result.value == pytest.approx(0.5)

    def test_scale_invariant(self):
        obs = self._obs([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        assert track_loss(-3.0 * self.theta, obs).value == pytest.approx(track_loss(self.theta, obs).value)

    def test_track_with_one_valid_ray_skipped(self):
        result = track_loss(self.theta, self._obs([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]))
        assert result.value == 0.0
        assert result.valid == 0
        assert result.skipped == 1

    def test_empty(self):
        result = track_loss(self.theta, TrackObservations.empty())
        assert result.value == 0.0
        assert np.all(result.grad == 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(CASES):
            theta, obs = _track_case(rng)
            analytic = track_loss(theta, obs).grad
            numeric = _numeric_grad(lambda th: track_loss(th, obs).value, theta)
            assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


class TestEdgeLoss:
    """Disagreement of the two unprojections of an edge point."""

    def test_known_distance(self):
        theta = np.array([[0.0, 1.0, 0.0, -5.0], [0.0, 1.0, 0.0, -6.0]])
        obs = EdgeObservations(np.array([0]), np.array([1]), np.zeros((1, 3)), np.array([[0.0, 1.0, 0.0]]))
        result = edge_loss(theta, obs)
        assert result.value == pytest.approx(1.0)
        assert result.plane_hits.tolist() == [1, 1]

    def test_invalid_points_skipped(self):
        theta = np.array([[0.0, 1.0, 0.0, -5.0], [1.0, 0.0, 0.0, -6.0]])
        obs = EdgeObservations(np.array([0]), np.array([1]), np.zeros((1, 3)), np.array([[0.0, 1.0, 0.0]]))
        result = edge_loss(theta, obs)
        assert result.value == 0.0
        assert result.skipped == 1

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(CASES):
            theta, obs = _edge_case(rng)
            analytic = edge_loss(theta, obs).grad
            numeric = _numeric_grad(lambda th: edge_loss(th, obs).value, theta)
            assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


class TestPerpLoss:
    """|cos| between wall and floor/ceiling normals."""

    def test_orthogonal_is_zero(self):
        theta = np.array([[1.0, 0.0, 0.0, -2.0], [0.0, 0.0, 3.0, 0.0]])
        assert perp_loss(theta, [(0, 1)]).value == pytest.approx(0.0)

    def test_known_angle(self):
        theta = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
        assert perp_loss(theta, [(0, 1)]).value == pytest.approx(np.sqrt(0.5))

    def test_no_pairs(self):
        result = perp_loss(np.ones((2, 4)), [])
        assert result.value == 0.0
        assert result.valid == 0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        checked = 0
        while checked < CASES:
            n_planes = int(rng.integers(2, 6))
            theta = rng.normal(size=(n_planes, 4))
            pairs = np.array([rng.choice(n_planes, size=2, replace=False) for _ in range(int(rng.integers(1, 5)))])
            n = normalize_rows(theta)[:, :3]
            if np.min(np.abs(np.einsum("ij,ij->i", n[pairs[:, 0]], n[pairs[:, 1]]))) < 0.05:
                continue
            analytic = perp_loss(theta, pairs).grad
            numeric = _numeric_grad(lambda th: perp_loss(th, pairs).value, theta)
            assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6)
            checked += 1


class TestJointLoss:
    """Weighted sum with switchable terms."""

    def setup_method(self):
        self.theta = np.array([[0.0, 1.0, 0.0, -5.0], [0.0, 1.0, 0.0, -6.0]])
        self.tracks = TrackObservations(
            np.array([0, 0]), np.array([0, 0]),
            np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
            np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]), 1,
        )
        self.edges = EdgeObservations(np.array([0]), np.array([1]), np.zeros((1, 3)), np.array([[0.0, 1.0, 0.0]]))
        self.pairs = np.array([[0, 1]])

    def test_weighted_sum(self):
        total, grad, stats = joint_loss(self.theta, self.tracks, self.edges, self.pairs, 0.1, 0.2)
        assert total == pytest.approx(0.5 + 0.1 * 1.0 + 0.2 * 1.0)
        assert stats["terms"] == pytest.approx({"tracks": 0.5, "edges": 1.0, "perp": 1.0})
        assert grad.shape == self.theta.shape

    def test_disabled_terms_left_out(self):
        total, _, stats = joint_loss(
            self.theta, self.tracks, self.edges, self.pairs, 0.1, 0.2, use_edge=False, use_perp=False
        )
        assert total == pytest.approx(0.5)
        assert set(stats["terms"]) == {"tracks"}

    def test_normalize_rows(self):
        out = normalize_rows(np.array([[0.0, 2.0, 0.0, -10.0]]))
        assert np.allclose(out, [[0.0, 1.0, 0.0, -5.0]])
