from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lanebev.geometry import GridSpec, Pose
from lanebev.io import decode_tensor, encode_tensor
from lanebev.temporal import Accumulator, aggregate, sample_bilinear, step, warp_accumulator

SPEC = GridSpec.covering(16, 16, 0.5)


def filled(rng):
    return Accumulator(rng.uniform(0, 1, SPEC.shape), rng.integers(0, 5, SPEC.shape).astype(float))


def rot_z(theta, center=(0.0, 0.0)):
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    p = np.array([center[0], center[1], 0.0])
    return Pose(R, p - R @ p)


def test_identity_motion_unchanged(rng):
    acc = filled(rng)
    out = warp_accumulator(acc, Pose.identity(), SPEC)
    assert np.abs(out.values - acc.values).max() <= 1e-6
    assert np.abs(out.counts - acc.counts).max() <= 1e-6


@pytest.mark.parametrize("k", [1, 3, -2])
def test_integer_shift(rng, k):
    acc = filled(rng)
    # current cell at x maps to previous x + k cells
    motion = Pose(np.eye(3), np.array([k * SPEC.resolution, 0.0, 0.0]))
    out = warp_accumulator(acc, motion, SPEC)
    rows = SPEC.rows
    if k > 0:
        assert np.abs(out.values[:rows - k] - acc.values[k:]).max() <= 1e-6
        assert (out.values[rows - k:] == 0).all() and (out.counts[rows - k:] == 0).all()
    else:
        assert np.abs(out.values[-k:] - acc.values[:rows + k]).max() <= 1e-6
        assert (out.values[:-k] == 0).all()


def test_quarter_turn_about_grid_center():
    spec = GridSpec.covering(9, 9, 1.0)
    xs, ys = spec.cell_centers()
    center = (float(xs[4, 4]), float(ys[4, 4]))
    pattern = np.zeros(spec.shape)
    pattern[4, 1:8] = 1.0  # a bar through the center along columns
    pattern[2, 4] = 2.0
    out = warp_accumulator(Accumulator(pattern, np.ones(spec.shape)), rot_z(math.pi / 2, center), spec)
    # content moves by R^T (-90 deg); with rows along +x and columns along +y that is np.rot90(k=-1)
    assert np.abs(out.values - np.rot90(pattern, -1)).max() <= 1e-6
    assert out.values.sum() == pytest.approx(pattern.sum(), abs=1e-6)


def test_quarter_turn_direction():
    spec = GridSpec.covering(9, 9, 1.0)
    xs, ys = spec.cell_centers()
    center = (float(xs[4, 4]), float(ys[4, 4]))
    pattern = np.zeros(spec.shape)
    pattern[6, 4] = 1.0  # two cells ahead (+x) of the center in the previous frame
    # current p reads the previous frame at R p, so the old "ahead" cell shows up at R^T ahead (-y)
    out = warp_accumulator(Accumulator(pattern, np.ones(spec.shape)), rot_z(math.pi / 2, center), spec)
    r, c = np.unravel_index(np.argmax(out.values), spec.shape)
    assert ys[r, c] == pytest.approx(center[1] - 2.0)
    assert xs[r, c] == pytest.approx(center[0])


def test_aggregate_examples():
    z = Accumulator.empty(SPEC)
    y = np.full(SPEC.shape, 0.7)
    vis = np.ones(SPEC.shape, bool)
    a = aggregate(z, y, vis)
    assert (a.values == 0.7).all() and (a.counts == 1).all()
    for t in range(2, 6):
        a = step(a, Pose.identity(), SPEC, y, vis)
        assert np.allclose(a.values, 0.7) and (a.counts == t).all()
    b = Accumulator.empty(SPEC)
    for v in (1.0, 2.0, 3.0):
        b = step(b, Pose.identity(), SPEC, np.full(SPEC.shape, v), vis)
    assert np.allclose(b.values, 2.0) and (b.counts == 3).all()


def test_invisible_cells_pass_through(rng):
    acc = filled(rng)
    vis = rng.random(SPEC.shape) < 0.5
    out = aggregate(acc, rng.uniform(0, 1, SPEC.shape), vis)
    assert np.array_equal(out.values[~vis], acc.values[~vis])
    assert np.array_equal(out.counts[~vis], acc.counts[~vis])
    assert np.array_equal(out.counts[vis], acc.counts[vis] + 1)


def test_mean_of_fifty_noisy_observations():
    rng = np.random.default_rng(5)
    obs = rng.normal(1.0, 0.3, (50,) + SPEC.shape)
    acc = Accumulator.empty(SPEC)
    vis = np.ones(SPEC.shape, bool)
    for t in range(50):
        acc = step(acc, Pose.identity(), SPEC, obs[t], vis)
        assert np.abs(acc.values - obs[:t + 1].mean(0)).max() <= 1e-6
    assert (acc.counts == 50).all()


def test_count_cap():
    acc = Accumulator(np.zeros((2, 2)), np.full((2, 2), 500.0))
    out = aggregate(acc, np.ones((2, 2)), np.ones((2, 2), bool))
    assert np.allclose(out.values, 1 / 101) and (out.counts == 101).all()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        aggregate(Accumulator.empty(SPEC), np.zeros((3, 3)), np.ones((3, 3), bool))


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-0.5, 0.5))
def test_warp_never_increases_total_count_bound(dx, dy, yaw):
    acc = Accumulator(np.ones(SPEC.shape), np.ones(SPEC.shape))
    m = rot_z(yaw)
    m = Pose(m.rotation, m.translation + np.array([dx, dy, 0.0]))
    out = warp_accumulator(acc, m, SPEC)
    assert (out.counts >= -1e-12).all() and (out.counts <= 1 + 1e-12).all()


def test_sample_bilinear_clamp():
    g = np.arange(6.0).reshape(2, 3)
    assert sample_bilinear(g, np.array([-1.0]), np.array([5.0]), mode="clamp")[0] == 2.0
    assert sample_bilinear(g, np.array([0.5]), np.array([0.5]))[0] == pytest.approx(2.0)
    assert sample_bilinear(g, np.array([5.0]), np.array([0.0]))[0] == 0.0


def test_snapshot_roundtrip(rng):
    acc = filled(rng)
    t = {k: decode_tensor(encode_tensor(v)) for k, v in acc.to_tensors().items()}
    assert np.array_equal(t["values"], acc.values) and np.array_equal(t["counts"], acc.counts)
