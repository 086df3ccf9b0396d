"""Rigid poses, the pinhole camera and the overhead grid.

Frames: the vehicle frame has x forward, y left, z up. Camera coordinates
follow the usual optical convention (x right, y down, z along the optical
axis). ``Pose`` maps points from its source frame into its target frame,
``p_target = R @ p_source + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

DEPTH_EPSILON = 1e-6


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rpy(cls, roll: float = 0.0, pitch: float = 0.0, yaw: float = 0.0,
                 translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Rotation R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
        return cls(rpy_matrix(roll, pitch, yaw), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def yaw_pose(yaw: float) -> Pose:
    return Pose.from_rpy(yaw=yaw)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def projection_matrix(self) -> np.ndarray:
        """The 3x4 matrix K [R | t] taking homogeneous vehicle points to pixels."""
        rt = np.hstack([self.extrinsics.rotation, self.extrinsics.translation[:, None]])
        return self.K @ rt

    @property
    def center(self) -> np.ndarray:
        """Optical center expressed in the vehicle frame."""
        return invert(self.extrinsics).translation

    def with_extrinsics(self, extrinsics: Pose) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsics)


def project_point(cam: CameraModel, p_vehicle) -> Optional[Tuple[float, float, float]]:
    """Project one vehicle-frame point; ``None`` when it is not in front of the camera."""
    p = np.asarray(p_vehicle, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("point has non-finite coordinates")
    x, y, z = cam.extrinsics.rotation @ p + cam.extrinsics.translation
    if z <= DEPTH_EPSILON:
        return None
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, float(z))


def project_points(cam: CameraModel, points: np.ndarray):
    """Vectorized projection of (..., 3) points.

    Returns ``(u, v, depth, in_front)``; u and v are garbage where
    ``in_front`` is false.
    """
    pc = cam.extrinsics.apply(points)
    depth = pc[..., 2]
    in_front = depth > DEPTH_EPSILON
    safe = np.where(in_front, depth, 1.0)
    u = cam.fx * pc[..., 0] / safe + cam.cx
    v = cam.fy * pc[..., 1] / safe + cam.cy
    return u, v, depth, in_front


def forward_camera(height: float = 1.7, pitch_down_deg: float = 5.0, forward: float = 0.0,
                   fx: float = 800.0, fy: float = 800.0, width: int = 1024, height_px: int = 512) -> CameraModel:
    """Forward-looking camera mounted ``height`` m above the vehicle origin, pitched down."""
    # Optical axes in vehicle coordinates before pitch: x_cam=-y, y_cam=-z, z_cam=+x.
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    pitch = math.radians(pitch_down_deg)
    # Pitching the camera down is a positive rotation about the vehicle y axis.
    cam_to_vehicle = rpy_matrix(0.0, pitch, 0.0) @ base.T
    R = cam_to_vehicle.T
    c = np.array([forward, 0.0, height])
    return CameraModel(fx, fy, width / 2.0 - 0.5, height_px / 2.0 - 0.5, width, height_px, Pose(R, -R @ c))


@dataclass(frozen=True)
class GridSpec:
    """Overhead raster: row index runs along vehicle x, column index along y."""

    rows: int
    cols: int
    resolution: float
    origin: Tuple[float, float]

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one cell")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def full(cls) -> "GridSpec":
        """960 x 960 cells at 5 cm covering x in [0, 48), y in [-24, 24)."""
        return cls.covering(960, 960, 0.05)

    @classmethod
    def covering(cls, rows: int, cols: int, resolution: float) -> "GridSpec":
        """Grid with the ego at the rear-center edge: x in [0, rows*res), y centered."""
        half = cols * resolution / 2.0
        return cls(rows, cols, resolution, (resolution / 2.0, -half + resolution / 2.0))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def extent(self) -> Tuple[float, float]:
        return (self.rows * self.resolution, self.cols * self.resolution)

    @property
    def x_range(self) -> Tuple[float, float]:
        lo = self.origin[0] - self.resolution / 2.0
        return (lo, lo + self.rows * self.resolution)

    @property
    def y_range(self) -> Tuple[float, float]:
        lo = self.origin[1] - self.resolution / 2.0
        return (lo, lo + self.cols * self.resolution)

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Dense (rows, cols) arrays of cell-center x and y."""
        xs = self.origin[0] + self.resolution * np.arange(self.rows)
        ys = self.origin[1] + self.resolution * np.arange(self.cols)
        return np.meshgrid(xs, ys, indexing="ij")

    def to_continuous(self, x, y):
        """Fractional (row, col) coordinates; integer values are cell centers."""
        return ((np.asarray(x) - self.origin[0]) / self.resolution,
                (np.asarray(y) - self.origin[1]) / self.resolution)

    def to_json(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "resolution": self.resolution,
                "origin": list(self.origin)}

    @classmethod
    def from_json(cls, d: dict) -> "GridSpec":
        return cls(int(d["rows"]), int(d["cols"]), float(d["resolution"]), tuple(d["origin"]))


def cell_center(spec: GridSpec, i: int, j: int) -> Tuple[float, float]:
    if not (0 <= i < spec.rows and 0 <= j < spec.cols):
        raise IndexError(f"cell ({i}, {j}) outside {spec.rows}x{spec.cols} grid")
    return (spec.origin[0] + i * spec.resolution, spec.origin[1] + j * spec.resolution)


def point_to_cell(spec: GridSpec, x: float, y: float) -> Optional[Tuple[int, int]]:
    """Nearest cell to a point, or ``None`` outside the grid."""
    r, c = spec.to_continuous(x, y)
    i, j = int(np.floor(r + 0.5)), int(np.floor(c + 0.5))
    if 0 <= i < spec.rows and 0 <= j < spec.cols:
        return (i, j)
    return None


def points_to_cells(spec: GridSpec, xy: np.ndarray):
    """Vectorized ``point_to_cell``: returns (rows, cols, inside-mask)."""
    r, c = spec.to_continuous(xy[..., 0], xy[..., 1])
    i = np.floor(r + 0.5).astype(np.int64)
    j = np.floor(c + 0.5).astype(np.int64)
    inside = (i >= 0) & (i < spec.rows) & (j >= 0) & (j < spec.cols)
    return i, j, inside
