from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lanebev.geometry import (CameraModel, GridSpec, Pose, cell_center, compose, forward_camera, invert,
                              point_to_cell, points_to_cells, project_point, project_points)

from conftest import random_pose


def test_compose_identity():
    p = compose(Pose.identity(), Pose.identity())
    assert np.array_equal(p.matrix(), np.eye(4))


def test_compose_inverse(rng):
    for _ in range(20):
        p = random_pose(rng)
        q = compose(p, invert(p))
        assert np.allclose(q.matrix(), np.eye(4), atol=1e-9)
        assert np.allclose(compose(invert(p), p).matrix(), np.eye(4), atol=1e-9)


def test_compose_matches_homogeneous_product(rng):
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)
        pts = rng.standard_normal((10, 3))
        assert np.allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-9)


@given(st.integers(0, 2 ** 32 - 1))
def test_compose_associative(seed):
    r = np.random.default_rng(seed)
    a, b, c = random_pose(r), random_pose(r), random_pose(r)
    lhs = compose(compose(a, b), c).matrix()
    rhs = compose(a, compose(b, c)).matrix()
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.001, np.zeros(3))


def test_project_point_examples():
    cam = CameraModel(1.0, 1.0, 0.0, 0.0, 10, 10)
    assert project_point(cam, (0, 0, 1)) == (0.0, 0.0, 1.0)
    cam = CameraModel(100.0, 100.0, 50.0, 50.0, 100, 100)
    assert project_point(cam, (0.5, 0, 1)) == (100.0, 50.0, 1.0)
    assert project_point(cam, (0, 0, -1)) is None
    assert project_point(cam, (0, 0, 0)) is None


def test_project_point_rejects_nonfinite():
    cam = CameraModel(1.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(ValueError):
        project_point(cam, (np.nan, 0, 1))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 50), st.floats(1.5, 10))
def test_project_scale_invariance(x, y, z, k):
    cam = CameraModel(700.0, 650.0, 320.0, 240.0, 640, 480)
    u1, v1, _ = project_point(cam, (x, y, z))
    u2, v2, d2 = project_point(cam, (k * x, k * y, k * z))
    assert abs(u1 - u2) <= 1e-9 * max(1.0, abs(u1)) and abs(v1 - v2) <= 1e-9 * max(1.0, abs(v1))
    assert d2 == pytest.approx(k * z)


def test_project_points_matches_scalar(rng):
    cam = forward_camera()
    pts = np.column_stack([rng.uniform(-5, 40, 200), rng.uniform(-20, 20, 200), rng.uniform(-1, 3, 200)])
    u, v, d, ok = project_points(cam, pts)
    for k, p in enumerate(pts):
        r = project_point(cam, p)
        assert (r is not None) == ok[k]
        if r is not None:
            assert np.allclose((u[k], v[k], d[k]), r, atol=1e-9)


def test_projection_matrix_is_k_rt(rng):
    cam = forward_camera()
    p = np.array([12.0, 1.5, 0.2])
    h = cam.projection_matrix @ np.r_[p, 1.0]
    u, v, d = project_point(cam, p)
    assert np.allclose(h[:2] / h[2], (u, v), atol=1e-9) and h[2] == pytest.approx(d)


def test_forward_camera_geometry():
    cam = forward_camera(height=1.7, pitch_down_deg=5.0)
    assert np.allclose(cam.center, (0, 0, 1.7), atol=1e-12)
    # the optical axis hits flat ground at 1.7 / tan(5 deg) ahead, at the image center
    dist = 1.7 / np.tan(np.radians(5.0))
    u, v, _ = project_point(cam, (dist, 0.0, 0.0))
    assert u == pytest.approx(cam.cx, abs=1e-9) and v == pytest.approx(cam.cy, abs=1e-9)
    # a point to the left of the vehicle lands left of center
    assert project_point(cam, (10.0, 2.0, 0.0))[0] < cam.cx


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 0.0, 0.0, 0, 10)


def test_full_grid():
    spec = GridSpec.full()
    assert spec.shape == (960, 960) and spec.resolution == 0.05
    assert cell_center(spec, 0, 0) == pytest.approx((0.025, -23.975), abs=1e-12)
    assert spec.x_range == pytest.approx((0.0, 48.0)) and spec.y_range == pytest.approx((-24.0, 24.0))


def test_cell_center_range_checks():
    spec = GridSpec.covering(4, 5, 0.5)
    with pytest.raises(IndexError):
        cell_center(spec, 4, 0)
    with pytest.raises(IndexError):
        cell_center(spec, 0, -1)
    assert point_to_cell(spec, -1.0, 0.0) is None


def test_point_to_cell_roundtrip_all_cells():
    spec = GridSpec.full()
    ii, jj = np.meshgrid(np.arange(960), np.arange(960), indexing="ij")
    xs, ys = spec.cell_centers()
    i, j, ok = points_to_cells(spec, np.stack([xs, ys], axis=-1).reshape(-1, 2))
    assert ok.all()
    assert np.array_equal(i, ii.reshape(-1)) and np.array_equal(j, jj.reshape(-1))
    for a, b in [(0, 0), (959, 959), (17, 403)]:
        assert point_to_cell(spec, *cell_center(spec, a, b)) == (a, b)


@given(st.integers(1, 40), st.integers(1, 40), st.floats(0.01, 2.0), st.data())
def test_point_to_cell_nearest(rows, cols, res, data):
    spec = GridSpec.covering(rows, cols, res)
    x = data.draw(st.floats(*spec.x_range, exclude_max=True))
    y = data.draw(st.floats(*spec.y_range, exclude_max=True))
    cell = point_to_cell(spec, x, y)
    assert cell is not None
    cx, cy = cell_center(spec, *cell)
    assert abs(cx - x) <= res / 2 + 1e-9 and abs(cy - y) <= res / 2 + 1e-9


def test_gridspec_json_roundtrip():
    spec = GridSpec.covering(10, 12, 0.25)
    assert GridSpec.from_json(spec.to_json()) == spec


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(10, 10, 0.0, (0, 0))
    with pytest.raises(ValueError):
        GridSpec(0, 10, 0.1, (0, 0))
