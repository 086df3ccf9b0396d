"""Differentiable camera-to-ground backprojection.

Each overhead cell is lifted to its ground height, projected into the
camera and the image is sampled there with bilinear interpolation and zero
padding. Cells that fall behind the camera or outside the image are
invalid and carry exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import DEPTH_EPSILON, CameraModel, GridSpec


@dataclass
class WarpResult:
    bev_image: np.ndarray  # C x rows x cols
    valid: np.ndarray  # rows x cols


@dataclass
class WarpState:
    """What the VJP needs from a forward call."""

    image: np.ndarray
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    du_dz: np.ndarray
    dv_dz: np.ndarray


def _project_lifted(ground: np.ndarray, cam: CameraModel, spec: GridSpec):
    xs, ys = spec.cell_centers()
    R, t = cam.extrinsics.rotation, cam.extrinsics.translation
    z = ground.astype(np.float64)
    X = R[0, 0] * xs + R[0, 1] * ys + R[0, 2] * z + t[0]
    Y = R[1, 0] * xs + R[1, 1] * ys + R[1, 2] * z + t[1]
    Z = R[2, 0] * xs + R[2, 1] * ys + R[2, 2] * z + t[2]
    front = Z > DEPTH_EPSILON
    Zs = np.where(front, Z, 1.0)
    u = cam.fx * X / Zs + cam.cx
    v = cam.fy * Y / Zs + cam.cy
    # quotient rule along d(X, Y, Z)/dz = third column of R
    du_dz = cam.fx * (R[0, 2] * Zs - X * R[2, 2]) / (Zs * Zs)
    dv_dz = cam.fy * (R[1, 2] * Zs - Y * R[2, 2]) / (Zs * Zs)
    valid = front & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    return u, v, valid, du_dz, dv_dz


def _corners(u, v, width, height):
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx = u - x0
    fy = v - y0
    out = []
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        out.append((np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1), np.where(inside, wgt, 0.0), inside))
    return out, fx, fy


def backproject(image: np.ndarray, ground: np.ndarray, cam: CameraModel, spec: GridSpec,
                return_state: bool = False):
    """Sample ``image`` (C x H x W) at the projection of every lifted grid cell."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != (cam.height, cam.width):
        raise ValueError(f"image shape {image.shape} does not match camera {cam.height}x{cam.width}")
    ground = np.asarray(ground)
    if ground.shape != spec.shape:
        raise ValueError(f"ground shape {ground.shape} does not match grid {spec.shape}")
    u, v, valid, du_dz, dv_dz = _project_lifted(ground, cam, spec)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    corners, _, _ = _corners(uc, vc, cam.width, cam.height)
    out = np.zeros((image.shape[0],) + spec.shape, dtype=np.float64)
    for yi, xi, wgt, _ in corners:
        out += image[:, yi, xi] * wgt
    out *= valid
    result = WarpResult(out.astype(image.dtype if image.dtype.kind == "f" else np.float64), valid)
    if return_state:
        return result, WarpState(image, uc, vc, valid, du_dz, dv_dz)
    return result


def backproject_vjp(upstream: np.ndarray, state: WarpState, need_image: bool = True):
    """Vector-Jacobian product of :func:`backproject` for image and ground heights."""
    upstream = np.asarray(upstream)
    c, h, w = state.image.shape
    if upstream.shape != (c,) + state.valid.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match forward output "
                         f"{(c,) + state.valid.shape}")
    g = np.where(state.valid, upstream, 0.0)
    corners, fx, fy = _corners(state.u, state.v, w, h)
    (y00, x00, _, in00), (y01, x01, _, in01), (y10, x10, _, in10), (y11, x11, _, in11) = corners
    img = state.image
    i00 = img[:, y00, x00] * in00
    i01 = img[:, y01, x01] * in01
    i10 = img[:, y10, x10] * in10
    i11 = img[:, y11, x11] * in11
    d_du = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    d_dv = (1 - fx) * (i10 - i00) + fx * (i11 - i01)
    grad_ground = (g * (d_du * state.du_dz + d_dv * state.dv_dz)).sum(axis=0)
    grad_ground = np.where(state.valid, grad_ground, 0.0)
    grad_image = None
    if need_image:
        acc = np.zeros((c, h * w), dtype=np.float64)
        gflat = g.reshape(c, -1)
        for yi, xi, wgt, _ in corners:
            idx = (yi * w + xi).reshape(-1)
            contrib = gflat * wgt.reshape(-1)
            for ch in range(c):
                acc[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
        grad_image = acc.reshape(c, h, w)
    return grad_image, grad_ground


def backproject_op(image: "ad.Tensor", ground: "ad.Tensor", cam: CameraModel, spec: GridSpec):
    """Tape-registered backprojection.

    ``image`` is C x H x W or N x C x H x W; ``ground`` is rows x cols,
    N x rows x cols or N x 1 x rows x cols. ``cam`` may be a single camera
    or one per batch item. Returns (warped tensor, validity masks).
    """
    image, ground = ad.as_tensor(image), ad.as_tensor(ground)
    img = image.data
    gnd = ground.data
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    n = img.shape[0]
    gshape = gnd.shape
    gnd = gnd.reshape(n, *spec.shape)
    cams = cam if isinstance(cam, (list, tuple)) else [cam] * n
    outs, states = [], []
    for k in range(n):
        res, st = backproject(img[k], gnd[k], cams[k], spec, return_state=True)
        outs.append(res.bev_image)
        states.append(st)
    out = np.stack(outs).astype(image.dtype)
    valid = np.stack([s.valid for s in states])
    if not batched:
        out = out[0]

    def vjp(g):
        g4 = g if batched else g[None]
        gi, gg = [], []
        for k in range(n):
            a, b = backproject_vjp(g4[k], states[k], need_image=image.requires_grad)
            gi.append(a)
            gg.append(b)
        grad_img = None
        if image.requires_grad:
            grad_img = np.stack(gi).astype(image.dtype)
            if not batched:
                grad_img = grad_img[0]
        grad_gnd = np.stack(gg).reshape(gshape).astype(ground.dtype) if ground.requires_grad else None
        return grad_img, grad_gnd

    return ad.custom_op(out, (image, ground), vjp, "backproject"), (valid if batched else valid[0])
