from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from lanebev.data import DESK_GRID
from lanebev.dt_label import lane_target
from lanebev.geometry import Pose, point_to_cell, project_points
from lanebev.synth import (CITY, HIGHWAY, Box, LidarConfig, cast, make_scene, render_camera,
                           simulate_lidar)

from roundtrip import roundtrip_error

FLAT = replace(HIGHWAY, curvature_range=0.0, slope_range=0.0, curvature_quadratic=0.0, ground_noise=0.0,
               clutter_density=0.0)


def test_same_seed_identical():
    a, b = make_scene(3), make_scene(3)
    assert np.array_equal(a.ground_coef, b.ground_coef) and np.array_equal(a.waves, b.waves)
    assert a.boxes == b.boxes
    pa = simulate_lidar(a, a.trajectory[-1]).points
    pb = simulate_lidar(b, b.trajectory[-1]).points
    assert np.array_equal(pa, pb)
    c = make_scene(4)
    assert not np.array_equal(a.ground_coef, c.ground_coef)


@pytest.mark.parametrize("seed", range(6))
def test_boundaries_are_lanes_plus_one(seed):
    for cfg in (HIGHWAY, CITY):
        s = make_scene(seed, cfg)
        assert len(s.offsets) == s.lane_count + 1
        assert cfg.lane_range[0] <= s.lane_count <= cfg.lane_range[1]
        assert np.allclose(np.diff(s.offsets), cfg.lane_width)


def test_two_lanes_three_boundaries():
    s = make_scene(0, replace(FLAT, lane_range=(2, 2)))
    assert s.lane_count == 2 and len(s.offsets) == 3
    assert len(s.lanes(DESK_GRID).boundaries) == 3


def test_flat_straight_config():
    s = make_scene(11, FLAT)
    xs, ys = DESK_GRID.cell_centers()
    assert np.abs(s.ground(xs, ys)).max() == 0.0
    for b in s.lanes(DESK_GRID).boundaries:
        assert np.ptp(b[:, 1]) == 0.0 and (b[:, 2] == 0.0).all()


@pytest.mark.parametrize("seed", range(5))
def test_slope_within_five_percent(seed):
    s = make_scene(seed)
    xs, ys = DESK_GRID.cell_centers()
    gx, gy = s.ground_gradient(xs, ys)
    assert np.hypot(gx, gy).max() <= 0.05


@pytest.mark.parametrize("seed", range(4))
def test_lanes_lie_on_ground(seed):
    s = make_scene(seed)
    for b in s.lanes(DESK_GRID).boundaries:
        assert np.abs(b[:, 2] - s.ground(b[:, 0], b[:, 1])).max() <= 1e-9


def test_trajectory_on_surface():
    s = make_scene(2)
    for p in s.trajectory:
        x, y, z = p.translation
        assert abs(z - float(s.ground(x, y))) <= 1e-9
    assert np.allclose(s.trajectory[-1].translation[:2], 0.0)


def test_ray_at_45_degrees_hits_two_meters_out():
    s = make_scene(0, FLAT)
    sensor = LidarConfig(channels=1, elevation_deg=(-45.0, -45.0), azimuth_step_deg=90.0, noise_sigma=0.0,
                         mount=(0.0, 0.0, 2.0))
    pts = simulate_lidar(s, Pose.identity(), sensor).points
    assert len(pts) == 4
    assert np.allclose(np.hypot(pts[:, 0], pts[:, 1]), 2.0, atol=1e-9)
    assert np.allclose(pts[:, 2], 0.0, atol=1e-9)
    noisy = simulate_lidar(s, Pose.identity(), replace(sensor, noise_sigma=0.02)).points
    assert np.allclose(np.hypot(noisy[:, 0], noisy[:, 1]), 2.0, atol=0.1)


@pytest.mark.parametrize("seed", range(3))
def test_zero_noise_points_on_surface(seed):
    s = make_scene(seed, replace(HIGHWAY, clutter_density=0.0))
    sensor = replace(s.config.lidar, noise_sigma=0.0)
    pose = s.trajectory[-1]
    cloud = simulate_lidar(s, pose, sensor).points
    world = pose.apply(cloud[:, :3])
    assert np.abs(world[:, 2] - s.ground(world[:, 0], world[:, 1])).max() <= 1e-6


def test_box_in_path_returns_face():
    s = make_scene(0, FLAT)
    s.boxes = [Box((10.0, 0.0), 0.0, 4.0, 2.0, 1.5, 0.0, (0.5, 0.5, 0.5))]
    d = np.array([[1.0, 0.0, 0.0], [math.cos(0.05), 0.0, -math.sin(0.05)]])
    dist, which = cast(s, np.array([0.0, 0.0, 1.0]), d, 60.0)
    assert which.tolist() == [0, 0]
    assert dist[0] == pytest.approx(8.0)
    assert dist[1] == pytest.approx(8.0 / math.cos(0.05))
    # ray passing above the box reaches the ground far away
    up = np.array([[math.cos(0.02), 0.0, -math.sin(0.02)]])
    dist, which = cast(s, np.array([0.0, 0.0, 3.0]), up, 200.0)
    assert which[0] == -1 and dist[0] == pytest.approx(3.0 / math.sin(0.02))


def test_lidar_intensity_paint_vs_road():
    s = make_scene(0, replace(FLAT, clutter_density=0.0))
    sensor = replace(s.config.lidar, intensity_noise=0.0, noise_sigma=0.0)
    pts = simulate_lidar(s, Pose.identity(), sensor).points
    paint = s.paint_mask(pts[:, 0], pts[:, 1])
    road = s.on_road(pts[:, 0], pts[:, 1]) & ~paint
    assert np.allclose(pts[paint, 3], 0.9) and np.allclose(pts[road, 3], 0.2)


def test_uniform_texture_uniform_image():
    s = make_scene(0, replace(FLAT, clutter_density=0.0, lane_range=(2, 2)))
    s.albedo_waves = np.zeros((0, 4))
    s.offsets = np.array([-100.0, 100.0, 300.0])  # no paint or verge in view
    cam = s.config.camera()
    img = render_camera(s, cam, noise=0.0)
    # rows seeing the ground within about 20 m (farther rows reach the cast range or far paint)
    below = img[:, 330:, :]
    assert np.ptp(below.reshape(3, -1), axis=1).max() == 0.0


def test_painted_line_is_straight_in_image():
    s = make_scene(0, replace(FLAT, clutter_density=0.0))
    cam = s.config.camera()
    y0 = float(s.offsets[np.argmin(np.abs(s.offsets))])
    xs = np.linspace(6.0, 40.0, 30)
    pts = np.column_stack([xs, np.full_like(xs, y0), np.zeros_like(xs)])
    u, v, _, ok = project_points(cam, pts)
    ok &= (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    uv = np.column_stack([u[ok], v[ok]])
    assert len(uv) >= 20
    # collinear: fit a line u = a v + b
    A = np.column_stack([uv[:, 1], np.ones(len(uv))])
    coef, *_ = np.linalg.lstsq(A, uv[:, 0], rcond=None)
    assert np.abs(A @ coef - uv[:, 0]).max() < 1e-6
    img = render_camera(s, cam, noise=0.0)
    # rendered paint sits on that line
    for u, v in uv[::5]:
        assert img[0, int(round(v)), int(round(u))] > 0.6


@pytest.mark.parametrize("seed", range(2))
def test_roundtrip_and_monotone_in_ground_error(seed):
    s = make_scene(seed)
    img = render_camera(s, s.config.camera(), noise=0.0).astype(np.float64)
    errs = [roundtrip_error(s, DESK_GRID, d, img) for d in (0.0, 0.1, 0.2, 0.5)]
    assert errs[0] <= 0.02
    assert all(a < b for a, b in zip(errs, errs[1:]))


def test_lane_vertices_carry_tau():
    s = make_scene(5)
    lanes = s.lanes(DESK_GRID)
    _, target = lane_target(lanes, DESK_GRID, 30.0)
    for b in lanes.boundaries:
        for x, y, _ in b:
            cell = point_to_cell(DESK_GRID, x, y)
            if cell is not None:
                assert target.grid[cell] == 30.0
