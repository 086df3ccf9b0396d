from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from lanebev import autodiff as ad
from lanebev.geometry import CameraModel, GridSpec, Pose, forward_camera
from lanebev.gradcheck import directional_error
from lanebev.warp import backproject, backproject_op, backproject_vjp


def nadir_setup(rows=20, cols=30, res=0.5, height=5.0):
    """Downward camera whose pixel (u=j, v=i) sees exactly cell (i, j)."""
    spec = GridSpec.covering(rows, cols, res)
    R = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    center = np.array([spec.origin[0], spec.origin[1], height])
    f = height / res
    cam = CameraModel(f, f, 0.0, 0.0, cols, rows, Pose(R, -R @ center))
    return cam, spec


def small_forward():
    cam = forward_camera(height=1.7, pitch_down_deg=5.0, fx=80.0, fy=80.0, width=96, height_px=48)
    return cam, GridSpec.covering(32, 32, 0.5)


def homography_oracle(image, cam, spec):
    """Flat ground z=0: pixel = K [r1 r2 t] (x, y, 1); sampled with scipy's linear interpolator."""
    R, t = cam.extrinsics.rotation, cam.extrinsics.translation
    H = cam.K @ np.column_stack([R[:, 0], R[:, 1], t])
    xs, ys = spec.cell_centers()
    p = np.stack([xs, ys, np.ones_like(xs)], axis=0).reshape(3, -1)
    q = H @ p
    depth = q[2]
    u, v = q[0] / np.where(depth > 0, depth, 1), q[1] / np.where(depth > 0, depth, 1)
    valid = (depth > 1e-6) & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    out = np.stack([ndimage.map_coordinates(ch, [np.where(valid, v, 0), np.where(valid, u, 0)], order=1,
                                            mode="constant", cval=0.0) for ch in image])
    out = out * valid
    return out.reshape((-1,) + spec.shape), valid.reshape(spec.shape)


def test_nadir_pixel_exact_copy(rng):
    cam, spec = nadir_setup()
    img = rng.uniform(0, 1, (3, 20, 30))
    res = backproject(img, np.zeros(spec.shape), cam, spec)
    assert res.valid.all()
    assert np.allclose(res.bev_image, img, atol=1e-12)


def test_constant_image(rng):
    cam, spec = small_forward()
    img = np.full((2, cam.height, cam.width), 0.37)
    res = backproject(img, 0.1 * rng.standard_normal(spec.shape), cam, spec)
    assert res.valid.any() and not res.valid.all()
    assert np.allclose(res.bev_image[:, res.valid], 0.37, atol=1e-12)
    assert np.all(res.bev_image[:, ~res.valid] == 0.0)


def test_all_behind_camera():
    cam, spec = nadir_setup()
    res = backproject(np.ones((1, 20, 30)), np.full(spec.shape, 10.0), cam, spec)
    assert not res.valid.any() and np.all(res.bev_image == 0.0)


def test_shape_checks():
    cam, spec = small_forward()
    with pytest.raises(ValueError):
        backproject(np.zeros((3, 10, 10)), np.zeros(spec.shape), cam, spec)
    with pytest.raises(ValueError):
        backproject(np.zeros((3, cam.height, cam.width)), np.zeros((3, 3)), cam, spec)
    _, st = backproject(np.zeros((3, cam.height, cam.width)), np.zeros(spec.shape), cam, spec, return_state=True)
    with pytest.raises(ValueError):
        backproject_vjp(np.zeros((2,) + spec.shape), st)


def test_flat_ground_matches_homography(rng):
    cam, spec = small_forward()
    img = rng.uniform(0, 1, (3, cam.height, cam.width))
    res = backproject(img, np.zeros(spec.shape), cam, spec)
    ref, valid = homography_oracle(img, cam, spec)
    assert np.array_equal(res.valid, valid)
    assert np.max(np.abs(res.bev_image - ref)) <= 1e-4


@given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_in_image(seed, a, b):
    r = np.random.default_rng(seed)
    cam, spec = small_forward()
    g = 0.2 * r.standard_normal(spec.shape)
    i1, i2 = r.uniform(0, 1, (2, 2, cam.height, cam.width))
    lhs = backproject(a * i1 + b * i2, g, cam, spec).bev_image
    rhs = a * backproject(i1, g, cam, spec).bev_image + b * backproject(i2, g, cam, spec).bev_image
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_piecewise_linear_along_projection_path():
    # with an image that is affine in (u, v) the bilinear sampler is exact, so
    # the sampled values are collinear with the (u, v) path of a lifted cell
    cam, spec = small_forward()
    vv, uu = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    img = (0.01 * uu + 0.02 * vv + 0.1)[None]
    base = np.zeros(spec.shape)
    res0 = backproject(img, base, cam, spec, return_state=True)[1]
    ok = res0.valid
    vals, us, vs_ = [], [], []
    for dz in (0.0, 0.01, 0.02):
        r, st = backproject(img, base + dz, cam, spec, return_state=True)
        ok &= r.valid
        vals.append(r.bev_image[0])
        us.append(st.u)
        vs_.append(st.v)
    vals, us, vs_ = map(np.array, (vals, us, vs_))
    # (u, v) points are collinear (projection of a vertical line)
    cross = (us[1] - us[0]) * (vs_[2] - vs_[0]) - (vs_[1] - vs_[0]) * (us[2] - us[0])
    assert np.max(np.abs(cross[ok])) < 1e-9
    assert np.allclose(vals[:, ok], 0.01 * us[:, ok] + 0.02 * vs_[:, ok] + 0.1, atol=1e-12)


def test_vjp_trivial_cases(rng):
    cam, spec = small_forward()
    img = rng.uniform(0, 1, (3, cam.height, cam.width))
    g = 0.1 * rng.standard_normal(spec.shape)
    _, st = backproject(img, g, cam, spec, return_state=True)
    gi, gg = backproject_vjp(np.zeros((3,) + spec.shape), st)
    assert not gi.any() and not gg.any()
    _, st = backproject(np.full((3, cam.height, cam.width), 0.5), g, cam, spec, return_state=True)
    _, gg = backproject_vjp(rng.standard_normal((3,) + spec.shape), st)
    assert np.allclose(gg, 0.0, atol=1e-12)


def test_ground_gradient_vs_finite_differences(rng):
    cam, spec = small_forward()
    vv, uu = np.mgrid[0:cam.height, 0:cam.width]
    img = np.stack([np.sin(0.3 * uu) * np.cos(0.2 * vv), np.cos(0.15 * uu + 0.1 * vv), 0.5 + 0 * uu])
    g = 0.05 * np.sin(np.indices(spec.shape)[0] / 5.0)
    res, st = backproject(img, g, cam, spec, return_state=True)
    up = rng.standard_normal((3,) + spec.shape)
    _, gg = backproject_vjp(up, st)
    h = 1e-4
    plus = backproject(img, g + h, cam, spec)
    minus = backproject(img, g - h, cam, spec)
    fd = ((plus.bev_image - minus.bev_image) / (2 * h) * up).sum(axis=0)
    # keep cells away from the bilinear lattice and the validity border
    far = ((np.abs(st.u - np.round(st.u)) > 0.01) & (np.abs(st.v - np.round(st.v)) > 0.01)
           & res.valid & plus.valid & minus.valid)
    du = np.abs(st.du_dz * 2 * h)
    dv = np.abs(st.dv_dz * 2 * h)
    stay = (np.floor(st.u - du) == np.floor(st.u + du)) & (np.floor(st.v - dv) == np.floor(st.v + dv))
    sel = far & stay
    assert sel.sum() > 100
    rel = np.abs(gg[sel] - fd[sel]) / np.maximum(np.abs(fd[sel]), 1e-6)
    assert np.max(rel) <= 1e-3


def test_dot_product_float64(rng):
    cam, spec = small_forward()
    img = rng.uniform(0, 1, (1, 3, cam.height, cam.width))
    g = 0.1 * rng.standard_normal((1, 1) + spec.shape)
    for _ in range(5):
        err = directional_error(lambda i, z: backproject_op(i, z, cam, spec)[0], [img, g], (0, 1),
                                np.float64, rng)
        assert err <= 1e-6


def test_backproject_op_batched_matches_single(rng):
    cam, spec = small_forward()
    cam2 = forward_camera(height=1.6, pitch_down_deg=4.0, fx=80.0, fy=80.0, width=96, height_px=48)
    img = rng.uniform(0, 1, (2, 3, cam.height, cam.width))
    g = 0.1 * rng.standard_normal((2, 1) + spec.shape)
    out, valid = backproject_op(ad.Tensor(img), ad.Tensor(g), [cam, cam2], spec)
    for k, c in enumerate((cam, cam2)):
        r = backproject(img[k], g[k, 0], c, spec)
        assert np.allclose(out.data[k], r.bev_image) and np.array_equal(valid[k], r.valid)
