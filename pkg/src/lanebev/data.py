"""Dataset layout, profiles and training-sample assembly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import io
from .dt_label import CITY_TAU, HIGHWAY_TAU, LaneGraph, lane_target
from .geometry import CameraModel, GridSpec, Pose, compose, yaw_pose
from .postprocess import CITY_THRESHOLD, HIGHWAY_THRESHOLD
from .sweeps import PointCloud, aggregate_sweeps, random_photometric, rasterize, rotate_points
from .synth import CITY, HIGHWAY, Scene, SceneConfig, count_visible, make_scene, render_camera, scene_sweeps
from .temporal import sample_bilinear

DESK_GRID = GridSpec.covering(192, 192, 0.125)


@dataclass(frozen=True)
class Profile:
    name: str
    tau: float
    threshold: float
    scene: SceneConfig
    grid: GridSpec = DESK_GRID


PROFILES = {
    "highway": Profile("highway", HIGHWAY_TAU, HIGHWAY_THRESHOLD, HIGHWAY),
    "city": Profile("city", CITY_TAU, CITY_THRESHOLD, CITY),
}


@dataclass
class SceneRecord:
    """Everything stored for one example, in the reference vehicle frame."""

    name: str
    cam: CameraModel
    sweeps: List[PointCloud]
    poses: List[Pose]
    image: np.ndarray  # H x W x 3 uint8
    ground: np.ndarray  # rows x cols
    lanes: LaneGraph
    _cloud: Optional[PointCloud] = field(default=None, repr=False)

    @property
    def cloud(self) -> PointCloud:
        if self._cloud is None:
            self._cloud = aggregate_sweeps(self.sweeps, self.poses)
        return self._cloud

    def compact(self, spec: GridSpec, margin: float = 4.0) -> "SceneRecord":
        """Copy holding only the aggregated points near the grid (for in-memory training sets)."""
        pts = self.cloud.points
        (x0, x1), (y0, y1) = spec.x_range, spec.y_range
        keep = ((pts[:, 0] >= x0 - margin) & (pts[:, 0] <= x1 + margin)
                & (pts[:, 1] >= y0 - margin) & (pts[:, 1] <= y1 + margin))
        cloud = PointCloud(pts[keep], self.cloud.frame, self.cloud.timestamp)
        return SceneRecord(self.name, self.cam, [], list(self.poses), self.image, self.ground, self.lanes, cloud)


@dataclass
class Sample:
    bev: np.ndarray  # 3 x rows x cols
    occupancy: np.ndarray
    image: np.ndarray  # 3 x H x W in [0, 1]
    cam: CameraModel
    ground: np.ndarray
    target: np.ndarray  # inverted truncated DT
    gt_mask: np.ndarray
    lanes: LaneGraph


def record_from_scene(scene: Scene, spec: GridSpec, name: str = "scene") -> SceneRecord:
    cam = scene.config.camera()
    img = render_camera(scene, cam)
    img8 = np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    sweeps = scene_sweeps(scene)
    return SceneRecord(name, cam, sweeps, list(scene.trajectory), img8,
                       scene.ground_grid(spec).astype(np.float32), scene.lanes(spec))


def _rotate_lanes(lanes: LaneGraph, yaw: float) -> LaneGraph:
    R = yaw_pose(yaw)
    return LaneGraph([R.apply(b) for b in lanes.boundaries], lanes.lane_count)


def _rotate_grid(grid: np.ndarray, spec: GridSpec, yaw: float) -> np.ndarray:
    """Resample a per-cell field after rotating the vehicle frame by ``yaw``."""
    xs, ys = spec.cell_centers()
    c, s = math.cos(yaw), math.sin(yaw)
    # value at new point p' comes from the old point R^T p'
    xo, yo = c * xs + s * ys, -s * xs + c * ys
    r, cc = spec.to_continuous(xo, yo)
    return sample_bilinear(grid, r, cc, mode="clamp").astype(grid.dtype)


def image_to_float(image_u8: np.ndarray) -> np.ndarray:
    return (image_u8.transpose(2, 0, 1).astype(np.float32) / 255.0)


def build_sample(rec: SceneRecord, spec: GridSpec, tau: float, yaw: float = 0.0,
                 photometric_seed=None, photometric: Optional[Dict[str, float]] = None) -> Sample:
    """Assemble network inputs and targets; ``yaw`` rotates the whole vehicle frame."""
    cloud = rec.cloud
    lanes, ground, cam = rec.lanes, rec.ground, rec.cam
    if yaw:
        cloud = rotate_points(cloud, yaw)
        lanes = count_visible(_rotate_lanes(lanes, yaw), spec)
        ground = _rotate_grid(ground, spec, yaw)
        # camera stays fixed to the scene: p_cam = E (R^T p')
        cam = cam.with_extrinsics(compose(cam.extrinsics, yaw_pose(-yaw)))
    bev = rasterize(cloud, spec)
    gt_mask, target = lane_target(lanes, spec, tau)
    image = image_to_float(rec.image)
    if photometric_seed is not None:
        image = random_photometric(image, photometric_seed, **(photometric or {})).astype(np.float32)
    return Sample(bev.grid, bev.mask, image, cam, np.asarray(ground, dtype=np.float32),
                  target.grid.astype(np.float32), gt_mask, lanes)


# -- on-disk layout ------------------------------------------------------------------

def write_scene(directory, rec: SceneRecord) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "calib.txt").write_text(io.format_calibration(rec.cam), encoding="utf-8")
    last = len(rec.sweeps) - 1
    for t, (sweep, pose) in enumerate(zip(rec.sweeps, rec.poses)):
        io.save_points(d / f"sweep_{t}.pcl", sweep.points)
        (d / f"pose_{t}.txt").write_text(io.format_pose(pose), encoding="utf-8")
    io.save_png(d / f"image_{last}.png", rec.image)
    io.save_tensor(d / f"ground_{last}.tnsr", np.asarray(rec.ground, dtype=np.float32))
    rec.lanes.save(d / f"lanes_{last}.json")


def read_scene(directory) -> SceneRecord:
    d = Path(directory)
    cam = io.parse_calibration((d / "calib.txt").read_text(encoding="utf-8"))
    n = len(list(d.glob("sweep_*.pcl")))
    if n == 0:
        raise FileNotFoundError(f"{d}: no sweeps")
    sweeps, poses = [], []
    for t in range(n):
        pts = io.load_points(d / f"sweep_{t}.pcl").astype(np.float64)
        pts[:, 3] = np.clip(pts[:, 3], 0.0, 1.0)
        sweeps.append(PointCloud(pts, "vehicle", t))
        poses.append(io.parse_pose((d / f"pose_{t}.txt").read_text(encoding="utf-8")))
    last = n - 1
    image = io.load_png(d / f"image_{last}.png")
    ground = io.load_tensor(d / f"ground_{last}.tnsr")
    lanes = LaneGraph.load(d / f"lanes_{last}.json")
    return SceneRecord(d.name, cam, sweeps, poses, image, ground, lanes)


def split_indices(n: int):
    """80/10/10 split by scene index."""
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    if n >= 3:
        n_train = min(n_train, n - 2)
        n_val = max(n_val, 1)
    idx = list(range(n))
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}


def scene_dir_name(k: int) -> str:
    return f"scene_{k:03d}"


def generate_record(k: int, seed: int, profile: Profile) -> SceneRecord:
    scene = make_scene(_scene_seed(seed, k), profile.scene)
    return record_from_scene(scene, profile.grid, scene_dir_name(k))


def _scene_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 0x5CE7E, k]).generate_state(1)[0])


def write_manifest(directory, n: int, seed: int, profile: Profile) -> dict:
    manifest = {"profile": profile.name, "seed": seed, "tau": profile.tau,
                "threshold": profile.threshold, "grid": profile.grid.to_json(),
                "scenes": [scene_dir_name(k) for k in range(n)],
                "splits": {k: [scene_dir_name(i) for i in v] for k, v in split_indices(n).items()}}
    Path(directory, "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory, "manifest.json")
    return json.loads(path.read_text(encoding="utf-8"))


def load_split(directory, split: str) -> List[SceneRecord]:
    manifest = read_manifest(directory)
    return [read_scene(Path(directory, name)) for name in manifest["splits"][split]]
