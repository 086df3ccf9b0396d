"""Synthetic driving scenes: ground surface, lanes, clutter, LiDAR and camera.

The reference vehicle frame (the ego at the last sweep) doubles as the
world frame. The road follows a circular arc through the origin, so all
lane boundaries are concentric arcs, i.e. exact parallel offset curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .dt_label import LaneGraph, rasterize_lanes
from .geometry import CameraModel, GridSpec, Pose, forward_camera
from .sweeps import PointCloud

SKY_RGB = np.array([0.55, 0.7, 0.9])
GRASS_RGB = np.array([0.25, 0.38, 0.18])
PAINT_ALBEDO = 0.9
ROAD_ALBEDO = 0.35


@dataclass(frozen=True)
class LidarConfig:
    channels: int = 32
    elevation_deg: Tuple[float, float] = (-25.0, 2.0)
    azimuth_step_deg: float = 0.4
    max_range: float = 60.0
    noise_sigma: float = 0.02
    intensity_noise: float = 0.05
    mount: Tuple[float, float, float] = (1.0, 0.0, 2.0)


@dataclass(frozen=True)
class SceneConfig:
    lane_range: Tuple[int, int] = (2, 6)
    curvature_range: float = 0.008  # max |1/R| in 1/m
    slope_range: float = 0.02  # max linear grade per axis
    curvature_quadratic: float = 3e-4  # max quadratic height coefficient (1/m)
    ground_noise: float = 0.02  # amplitude of smooth height undulation (m)
    clutter_density: float = 1.5  # mean number of vehicles in view
    image_noise: float = 0.01
    lane_width: float = 3.7
    paint_width: float = 0.15
    speed: float = 2.5  # ego travel between sweeps (m)
    n_sweeps: int = 5
    lidar: LidarConfig = field(default_factory=LidarConfig)
    camera_height: float = 1.7
    camera_pitch_deg: float = 5.0
    camera_fx: float = 800.0
    image_size: Tuple[int, int] = (1024, 512)  # width, height

    def camera(self) -> CameraModel:
        w, h = self.image_size
        return forward_camera(height=self.camera_height, pitch_down_deg=self.camera_pitch_deg,
                              fx=self.camera_fx, fy=self.camera_fx, width=w, height_px=h)


HIGHWAY = SceneConfig()
CITY = SceneConfig(lane_range=(2, 4), curvature_range=0.02, lane_width=3.2, speed=1.0,
                   clutter_density=3.0)


@dataclass(frozen=True)
class Box:
    center: Tuple[float, float]
    yaw: float
    length: float
    width: float
    height: float
    base: float
    color: Tuple[float, float, float]


@dataclass
class Scene:
    seed: int
    config: SceneConfig
    ground_coef: np.ndarray  # a, b, c, d, e (linear + quadratic terms)
    waves: np.ndarray  # K x 4: amplitude, kx, ky, phase
    curvature: float
    offsets: np.ndarray  # lateral offsets of the lane boundaries (left positive)
    lane_count: int
    albedo_waves: np.ndarray
    boxes: List[Box]
    trajectory: List[Pose]
    wave_bias: float = 0.0

    # -- ground ------------------------------------------------------------
    def ground(self, x, y) -> np.ndarray:
        a, b, c, d, e = self.ground_coef
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        z = a * x + b * y + c * x * x + d * y * y + e * x * y - self.wave_bias
        for amp, kx, ky, ph in self.waves:
            z = z + amp * np.sin(kx * x + ky * y + ph)
        return z

    def ground_gradient(self, x, y):
        a, b, c, d, e = self.ground_coef
        gx = a + 2 * c * x + e * y
        gy = b + 2 * d * y + e * x
        for amp, kx, ky, ph in self.waves:
            cs = amp * np.cos(kx * x + ky * y + ph)
            gx = gx + kx * cs
            gy = gy + ky * cs
        return gx, gy

    def ground_grid(self, spec: GridSpec) -> np.ndarray:
        xs, ys = spec.cell_centers()
        return self.ground(xs, ys)

    # -- road geometry -----------------------------------------------------
    def lateral(self, x, y) -> np.ndarray:
        """Signed lateral coordinate: boundary k is the level set ``offsets[k]``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        k = self.curvature
        if k == 0.0:
            return y
        r = 1.0 / k
        return r - math.copysign(1.0, r) * np.hypot(x, y - r)

    def paint_mask(self, x, y) -> np.ndarray:
        lat = self.lateral(x, y)
        half = self.config.paint_width / 2.0
        d = np.min(np.abs(lat[..., None] - self.offsets), axis=-1)
        return d <= half

    def on_road(self, x, y) -> np.ndarray:
        lat = self.lateral(x, y)
        return (lat >= self.offsets[0] - 1.0) & (lat <= self.offsets[-1] + 1.0)

    def albedo(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        base = np.full(np.broadcast(x, y).shape, ROAD_ALBEDO)
        for amp, kx, ky, ph in self.albedo_waves:
            base = base + amp * np.sin(kx * x + ky * y + ph)
        return np.where(self.paint_mask(x, y), PAINT_ALBEDO, base)

    def texture(self, x, y) -> np.ndarray:
        """Ground color (..., 3) at overhead positions."""
        alb = self.albedo(x, y)
        road = alb[..., None] * np.array([1.0, 1.0, 1.02])
        grass = GRASS_RGB * (1.0 + (alb[..., None] - ROAD_ALBEDO))
        return np.clip(np.where(self.on_road(x, y)[..., None], road, grass), 0.0, 1.0)

    def centerline_point(self, s: float) -> Tuple[float, float, float]:
        """Position and heading at arc length ``s`` along the ego's path (lateral 0)."""
        k = self.curvature
        if k == 0.0:
            return s, 0.0, 0.0
        th = s * k
        return math.sin(th) / k, (1.0 - math.cos(th)) / k, th

    def lanes(self, spec: GridSpec, margin: float = 6.0, step: float = 0.5) -> LaneGraph:
        """Boundary polylines covering the grid (plus ``margin``) and the visible-boundary count."""
        x0, x1 = spec.x_range
        s = np.arange(x0 - margin, x1 + margin + 1e-9, step)
        k = self.curvature
        polys = []
        for off in self.offsets:
            if k == 0.0:
                xs, ys = s, np.full_like(s, off)
            else:
                r = 1.0 / k
                rad = r - off  # signed radius of this boundary about (0, r)
                th = s / r
                xs = rad * np.sin(th)
                ys = r - rad * np.cos(th)
            ylo, yhi = spec.y_range
            keep = (ys >= ylo - margin) & (ys <= yhi + margin)
            if keep.sum() < 2:
                continue
            idx = np.flatnonzero(keep)
            xs, ys = xs[idx[0]:idx[-1] + 1], ys[idx[0]:idx[-1] + 1]
            polys.append(np.column_stack([xs, ys, self.ground(xs, ys)]))
        return count_visible(LaneGraph(polys, 0), spec)


def count_visible(lanes: LaneGraph, spec: GridSpec) -> LaneGraph:
    """Keep only boundaries touching the grid; lane_count becomes their number."""
    keep = [b for b in lanes.boundaries if rasterize_lanes(LaneGraph([b], 0), spec).any()]
    return LaneGraph(keep, len(keep))


def make_scene(seed: int, config: SceneConfig = HIGHWAY) -> Scene:
    rng = np.random.default_rng([seed, 1])
    lo, hi = config.lane_range
    lanes = int(rng.integers(lo, hi + 1))
    ego_lane = int(rng.integers(0, lanes))
    offsets = (np.arange(lanes + 1) - ego_lane - 0.5) * config.lane_width
    curvature = float(rng.uniform(-1.0, 1.0) * config.curvature_range)
    sr, q = config.slope_range, config.curvature_quadratic
    coef = np.array([rng.uniform(-sr, sr), rng.uniform(-sr, sr),
                     rng.uniform(-q, q), rng.uniform(-q, q), rng.uniform(-q, q) * 0.5])
    waves = []
    if config.ground_noise > 0:
        for _ in range(3):
            lam = rng.uniform(12.0, 30.0)
            ang = rng.uniform(0, 2 * np.pi)
            kk = 2 * np.pi / lam
            waves.append([config.ground_noise * rng.uniform(0.3, 1.0) / 3.0 * 2.0,
                          kk * math.cos(ang), kk * math.sin(ang), rng.uniform(0, 2 * np.pi)])
    waves = np.array(waves).reshape(-1, 4)
    albedo_waves = []
    for _ in range(4):
        lam = rng.uniform(2.0, 15.0)
        ang = rng.uniform(0, 2 * np.pi)
        kk = 2 * np.pi / lam
        albedo_waves.append([rng.uniform(0.01, 0.03), kk * math.cos(ang), kk * math.sin(ang),
                             rng.uniform(0, 2 * np.pi)])
    scene = Scene(seed, config, coef, waves, curvature, offsets, lanes, np.array(albedo_waves), [], [])
    scene.wave_bias = float(scene.ground(0.0, 0.0) + scene.wave_bias)

    n_boxes = int(rng.poisson(config.clutter_density))
    boxes = []
    for _ in range(n_boxes):
        lane = int(rng.integers(0, lanes))
        lat = (offsets[lane] + offsets[lane + 1]) / 2.0
        s = float(rng.uniform(6.0, 40.0))
        truck = rng.uniform() < 0.2
        length, width, height = (10.0, 2.5, 3.5) if truck else (4.5, 1.8, 1.5)
        px, py, th = scene.centerline_point(s)
        cx, cy = px - math.sin(th) * lat, py + math.cos(th) * lat
        if lane == ego_lane and s < 8.0:
            continue
        if any(math.hypot(cx - b.center[0], cy - b.center[1]) < (length + b.length) / 2 + 1.0 for b in boxes):
            continue
        color = tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3))
        boxes.append(Box((cx, cy), th, length, width, height, float(scene.ground(cx, cy)), color))
    scene.boxes = boxes

    traj = []
    for k in range(config.n_sweeps):
        s = -(config.n_sweeps - 1 - k) * config.speed
        x, y, th = scene.centerline_point(s)
        traj.append(Pose.from_rpy(yaw=th, translation=(x, y, float(scene.ground(x, y)))))
    scene.trajectory = traj
    return scene


# -- ray casting -----------------------------------------------------------------

def _ray_ground(scene: Scene, o: np.ndarray, d: np.ndarray, max_range: float, iters: int = 30):
    """Distance along unit rays to the ground surface (inf where missed)."""
    o = np.broadcast_to(o, d.shape)
    dz = d[..., 2]
    z0 = scene.ground(o[..., 0], o[..., 1])
    down = dz < -1e-3
    s = np.where(down, (o[..., 2] - z0) / np.where(down, -dz, 1.0), max_range)
    s = np.clip(s, 0.0, max_range)
    shape = s.shape
    s = s.reshape(-1).copy()
    of, df = o.reshape(-1, 3), d.reshape(-1, 3)
    active = np.arange(s.size)
    for _ in range(iters):
        if active.size == 0:
            break
        sa, oa, da = s[active], of[active], df[active]
        px = oa[:, 0] + sa * da[:, 0]
        py = oa[:, 1] + sa * da[:, 1]
        h = oa[:, 2] + sa * da[:, 2] - scene.ground(px, py)
        gx, gy = scene.ground_gradient(px, py)
        dh = da[:, 2] - gx * da[:, 0] - gy * da[:, 1]
        dh = np.where(np.abs(dh) < 1e-6, -1e-6, dh)
        step = h / dh
        sn = np.clip(sa - step, 0.0, 2.0 * max_range)
        s[active] = sn
        # converged rays and rays driven past twice the range leave the active set
        active = active[(np.abs(step) > 1e-10) & (sn < 2.0 * max_range)]
    s = s.reshape(shape)
    px = o[..., 0] + s * d[..., 0]
    py = o[..., 1] + s * d[..., 1]
    res = np.abs(o[..., 2] + s * dz - scene.ground(px, py))
    hit = (res < 1e-7) & (s > 0) & (s <= max_range)
    return np.where(hit, s, np.inf)


def _ray_box(box: Box, o: np.ndarray, d: np.ndarray):
    """Entry distance and hit-face normal index for rays against one oriented box."""
    c, sn = math.cos(box.yaw), math.sin(box.yaw)
    rel = o - np.array([box.center[0], box.center[1], box.base])
    ol = np.stack([c * rel[..., 0] + sn * rel[..., 1], -sn * rel[..., 0] + c * rel[..., 1],
                   np.broadcast_to(rel[..., 2], rel[..., 0].shape)], axis=-1)
    dl = np.stack([c * d[..., 0] + sn * d[..., 1], -sn * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)
    lo = np.array([-box.length / 2, -box.width / 2, 0.0])
    hi = np.array([box.length / 2, box.width / 2, box.height])
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (lo - ol) * inv
        t2 = (hi - ol) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dl == 0
    inside = (ol >= lo) & (ol <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=-1)
    leave = tmax.min(axis=-1)
    face = tmin.argmax(axis=-1)
    hit = (enter <= leave) & (enter > 0)
    return np.where(hit, enter, np.inf), face


def cast(scene: Scene, origin, dirs: np.ndarray, max_range: float):
    """Nearest hit along each ray: (distance, box index or -1 for ground)."""
    dist = _ray_ground(scene, np.asarray(origin, dtype=np.float64), dirs, max_range)
    which = np.full(dist.shape, -1, dtype=np.int64)
    for k, box in enumerate(scene.boxes):
        t, _ = _ray_box(box, np.asarray(origin, dtype=np.float64), dirs)
        closer = (t < dist) & (t <= max_range)
        dist = np.where(closer, t, dist)
        which = np.where(closer, k, which)
    return dist, which


def occluded(scene: Scene, origin, points: np.ndarray) -> np.ndarray:
    """True where the segment origin -> point is blocked by a clutter box."""
    origin = np.asarray(origin, dtype=np.float64)
    vec = points - origin
    length = np.linalg.norm(vec, axis=-1)
    dirs = vec / np.maximum(length, 1e-12)[..., None]
    blocked = np.zeros(length.shape, dtype=bool)
    for box in scene.boxes:
        t, _ = _ray_box(box, origin, dirs)
        blocked |= t < length - 1e-6
    return blocked


def simulate_lidar(scene: Scene, pose: Pose, sensor: Optional[LidarConfig] = None,
                   seed: Optional[int] = None, timestamp: int = 0) -> PointCloud:
    """One 360-degree sweep, returned in the vehicle frame at ``pose``."""
    sensor = sensor or scene.config.lidar
    rng = np.random.default_rng([scene.seed, 2, timestamp] if seed is None else seed)
    elev = np.radians(np.linspace(sensor.elevation_deg[0], sensor.elevation_deg[1], sensor.channels))
    az = np.radians(np.arange(0.0, 360.0, sensor.azimuth_step_deg))
    E, A = np.meshgrid(elev, az, indexing="ij")
    d_vehicle = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    mount = np.asarray(sensor.mount, dtype=np.float64)
    origin_w = pose.apply(mount)
    d_world = d_vehicle @ pose.rotation.T
    dist, which = cast(scene, origin_w, d_world, sensor.max_range)
    hit = np.isfinite(dist)
    d_vehicle, d_world, dist, which = d_vehicle[hit], d_world[hit], dist[hit], which[hit]
    p_world = origin_w + dist[:, None] * d_world
    on_ground = which < 0
    paint = on_ground & scene.paint_mask(p_world[:, 0], p_world[:, 1])
    road = on_ground & scene.on_road(p_world[:, 0], p_world[:, 1])
    base = np.where(paint, 0.9, np.where(road, 0.2, np.where(on_ground, 0.3, 0.5)))
    intensity = np.clip(base + sensor.intensity_noise * rng.standard_normal(len(base)), 0.0, 1.0)
    noisy = dist + (sensor.noise_sigma * rng.standard_normal(len(dist)) if sensor.noise_sigma > 0 else 0.0)
    p_vehicle = mount + noisy[:, None] * d_vehicle
    return PointCloud(np.column_stack([p_vehicle, intensity]), frame="vehicle", timestamp=timestamp)


def render_camera(scene: Scene, cam: CameraModel, pose: Optional[Pose] = None,
                  noise: Optional[float] = None, seed: Optional[int] = None) -> np.ndarray:
    """Ray-cast a 3 x H x W image in [0, 1] for a camera on the vehicle at ``pose``."""
    pose = pose or Pose.identity()
    noise = scene.config.image_noise if noise is None else noise
    vr, uc = np.meshgrid(np.arange(cam.height, dtype=np.float64), np.arange(cam.width, dtype=np.float64),
                         indexing="ij")
    dc = np.stack([(uc - cam.cx) / cam.fx, (vr - cam.cy) / cam.fy, np.ones_like(uc)], axis=-1)
    dc /= np.linalg.norm(dc, axis=-1, keepdims=True)
    cam_to_world = pose.rotation @ cam.extrinsics.rotation.T
    d_world = dc @ cam_to_world.T
    origin = pose.apply(cam.center)
    dist, which = cast(scene, origin, d_world, max_range=200.0)
    img = np.broadcast_to(SKY_RGB, dist.shape + (3,)).copy()
    hit = np.isfinite(dist)
    p = origin + np.where(hit, dist, 0.0)[..., None] * d_world
    ground_hit = hit & (which < 0)
    img[ground_hit] = scene.texture(p[ground_hit][:, 0], p[ground_hit][:, 1])
    for k, box in enumerate(scene.boxes):
        sel = which == k
        if not sel.any():
            continue
        _, face = _ray_box(box, origin, d_world[sel])
        shade = np.array([0.8, 0.9, 1.0])[face]
        img[sel] = np.array(box.color) * shade[:, None]
    if noise:
        rng = np.random.default_rng([scene.seed, 3] if seed is None else seed)
        img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)


def scene_sweeps(scene: Scene) -> List[PointCloud]:
    return [simulate_lidar(scene, pose, timestamp=k) for k, pose in enumerate(scene.trajectory)]
