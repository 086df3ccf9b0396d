"""LiDAR sweep handling: ego-motion compensation, BEV rasterization, augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import GridSpec, Pose, compose, invert, points_to_cells, yaw_pose

EMPTY_FILL = -10.0
MAX_SWEEPS = 10


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # N x 4: x, y, z, intensity
    frame: str = "vehicle"
    timestamp: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite values")
        if pts.size and (pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0):
            raise ValueError("intensity must lie in [0, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def with_xyz(self, xyz: np.ndarray, frame: Optional[str] = None) -> "PointCloud":
        pts = np.column_stack([xyz, self.intensity])
        return PointCloud(pts, self.frame if frame is None else frame, self.timestamp)


@dataclass(frozen=True)
class LidarBev:
    grid: np.ndarray  # 3 x rows x cols: max z, intensity at max z, min z
    mask: np.ndarray  # rows x cols occupancy

    @property
    def shape(self):
        return self.mask.shape


def compensate_ego(sweep: PointCloud, pose_sweep: Pose, pose_ref: Pose) -> PointCloud:
    """Express a sweep captured at ``pose_sweep`` in the vehicle frame at ``pose_ref``.

    Both poses map vehicle coordinates into one common world frame.
    """
    motion = compose(invert(pose_ref), pose_sweep)
    return sweep.with_xyz(motion.apply(sweep.xyz), frame="reference")


def aggregate_sweeps(sweeps: Sequence[PointCloud], poses: Sequence[Pose]) -> PointCloud:
    """Concatenate sweeps after compensating all of them into the last sweep's frame."""
    if not sweeps:
        raise ValueError("no sweeps to aggregate")
    if len(sweeps) != len(poses):
        raise ValueError(f"{len(sweeps)} sweeps but {len(poses)} poses")
    if len(sweeps) > MAX_SWEEPS:
        raise ValueError(f"at most {MAX_SWEEPS} sweeps are supported")
    ref = poses[-1]
    parts = [compensate_ego(s, p, ref).points for s, p in zip(sweeps, poses)]
    return PointCloud(np.concatenate(parts, axis=0), frame="reference", timestamp=sweeps[-1].timestamp)


def rasterize(cloud: PointCloud, spec: GridSpec, fill: float = EMPTY_FILL,
              encoding: str = "highest-lowest") -> LidarBev:
    """Rasterize points into a 3-channel overhead image.

    ``encoding="highest-lowest"``: (max z, intensity of the max-z point, min z).
    ``encoding="min-mean-count"``: (min z, mean intensity, point count), the
    alternative channel set; empty cells get (fill, 0, 0).
    Ties in z are broken by (x, y, intensity) so the result does not depend
    on point order.
    """
    grid = np.empty((3,) + spec.shape, dtype=np.float32)
    mask = np.zeros(spec.shape, dtype=bool)
    pts = cloud.points
    i, j, inside = points_to_cells(spec, pts[:, :2])
    pts, flat = pts[inside], (i * spec.cols + j)[inside]

    if encoding == "highest-lowest":
        grid[0] = fill
        grid[1] = 0.0
        grid[2] = fill
        if len(pts):
            order = np.lexsort((pts[:, 3], pts[:, 1], pts[:, 0], pts[:, 2], flat))
            sflat = flat[order]
            first = np.r_[True, sflat[1:] != sflat[:-1]]
            last = np.r_[sflat[1:] != sflat[:-1], True]
            lo, hi = order[first], order[last]
            cells = sflat[first]
            g = grid.reshape(3, -1)
            g[0, cells] = pts[hi, 2]
            g[1, cells] = pts[hi, 3]
            g[2, cells] = pts[lo, 2]
            mask.reshape(-1)[cells] = True
    elif encoding == "min-mean-count":
        n = spec.rows * spec.cols
        count = np.bincount(flat, minlength=n).astype(np.float64)
        isum = np.bincount(flat, weights=pts[:, 3], minlength=n)
        zmin = np.full(n, np.inf)
        np.minimum.at(zmin, flat, pts[:, 2])
        occ = count > 0
        grid[0] = np.where(occ, zmin, fill).reshape(spec.shape)
        grid[1] = np.where(occ, isum / np.maximum(count, 1.0), 0.0).reshape(spec.shape)
        grid[2] = count.reshape(spec.shape)
        mask[:] = occ.reshape(spec.shape)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    return LidarBev(grid, mask)


def rotate_points(cloud: PointCloud, yaw: float) -> PointCloud:
    """Rotate about the vehicle z axis (done before rasterizing to avoid resampling)."""
    if yaw == 0.0:
        return cloud
    return cloud.with_xyz(yaw_pose(yaw).apply(cloud.xyz))


# -- photometric augmentation ------------------------------------------------

def _rgb_to_hsv_planes(r, g, b):
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return h, s, maxc


def _hsv_to_rgb_planes(h, s, v):
    # closed form: channel n is v - v s clip(min(k, 4 - k), 0, 1) with k = (n + 6h) mod 6
    out = []
    for n in (5.0, 3.0, 1.0):
        k = (n + 6.0 * h) % 6.0
        out.append(v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0))
    return out


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Channel-last RGB in [0, 1] to HSV with hue in [0, 1)."""
    return np.stack(_rgb_to_hsv_planes(rgb[..., 0], rgb[..., 1], rgb[..., 2]), axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    return np.stack(_hsv_to_rgb_planes(hsv[..., 0], hsv[..., 1], hsv[..., 2]), axis=-1)


def photometric_augment(image: np.ndarray, brightness: float = 0.0, contrast: float = 0.0,
                        saturation: float = 0.0, hue: float = 0.0) -> np.ndarray:
    """Apply brightness/contrast/saturation/hue deltas to a 3 x H x W image in [0, 1].

    brightness is additive, contrast and saturation are relative gains
    (0 = unchanged), hue is a rotation in radians. Float32 input is
    processed in float32.
    """
    image = np.asarray(image)
    work = image.dtype if image.dtype.kind == "f" else np.float64
    out = image.astype(work)
    if brightness:
        out = np.clip(out + work.type(brightness), 0.0, 1.0)
    if contrast:
        mean = out.mean(dtype=np.float64)
        out = np.clip(mean + (1.0 + contrast) * (out - mean), 0.0, 1.0).astype(work)
    if saturation:
        gray = 0.299 * out[0] + 0.587 * out[1] + 0.114 * out[2]
        out = np.clip(gray + (1.0 + saturation) * (out - gray), 0.0, 1.0).astype(work)
    if hue:
        h, s, v = _rgb_to_hsv_planes(out[0], out[1], out[2])
        h = (h + hue / (2.0 * np.pi)) % 1.0
        out = np.clip(np.stack(_hsv_to_rgb_planes(h, s, v)), 0.0, 1.0).astype(work)
    return out


def random_photometric(image: np.ndarray, seed, brightness: float = 0.1, contrast: float = 0.1,
                       saturation: float = 0.1, hue: float = 0.05) -> np.ndarray:
    """Draw each delta uniformly from [-limit, limit]; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    d = rng.uniform(-1.0, 1.0, size=4) * np.array([brightness, contrast, saturation, hue])
    return photometric_augment(image, *d)
