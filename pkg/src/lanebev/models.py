"""Desk-scale ground-height and lane networks, losses, and training."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .data import Sample, SceneRecord, build_sample
from .geometry import GridSpec
from .io import load_tensors, parse_keyvalues, save_tensors
from .metrics import aggregate, default_bins, evaluate_scene
from .postprocess import extract_skeleton
from .sweeps import EMPTY_FILL
from .warp import backproject_op

log = logging.getLogger(__name__)

SENSOR_MODES = ("lidar", "camera", "both")


class TrainingDiverged(RuntimeError):
    pass


# -- parameters --------------------------------------------------------------------

class Module:
    """A named collection of parameter tensors."""

    def __init__(self):
        self.params: Dict[str, ad.Tensor] = {}

    def _conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
              dtype, gain: float = math.sqrt(2.0)):
        std = gain / math.sqrt(cin * k * k)
        self.params[f"{name}.w"] = ad.Tensor(rng.standard_normal((cout, cin, k, k)) * std,
                                             requires_grad=True, name=f"{name}.w", dtype=dtype)
        self.params[f"{name}.b"] = ad.Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b", dtype=dtype)

    def conv(self, name: str, x, stride: int = 1):
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride)

    def parameters(self) -> List[ad.Tensor]:
        return list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if state[k].shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {v.shape}")
            v.data = state[k].astype(v.dtype).copy()


# -- input encodings ------------------------------------------------------------------

HEIGHT_SCALE = 0.2


def lidar_features(bev: np.ndarray) -> np.ndarray:
    """Fixed affine input scaling of the 3-channel LiDAR image (batched or not)."""
    out = np.array(bev, dtype=np.float32, copy=True)
    scale = np.array([HEIGHT_SCALE, 1.0, HEIGHT_SCALE], dtype=np.float32)[:, None, None]
    shift = np.array([0.0, -0.3, 0.0], dtype=np.float32)[:, None, None]
    return out * scale + shift


def robust_ground_prior(bev: np.ndarray, spec: GridSpec, rounds: int = 3,
                        smooth_cells: int = 17) -> np.ndarray:
    """Parameter-free dense height guess from sparse LiDAR lowest points.

    A quadratic surface is fitted to the per-cell minimum heights with
    iterative outlier rejection, then inlier residuals are spread with a
    normalized box filter.
    """
    zmin = bev[2]
    occ = zmin > EMPTY_FILL + 1e-3
    if occ.sum() < 6:
        return np.zeros(spec.shape, dtype=np.float32)
    xs, ys = spec.cell_centers()
    A = np.stack([np.ones_like(xs), xs, ys, xs * xs, ys * ys, xs * ys], axis=-1)[occ]
    z = zmin[occ].astype(np.float64)
    keep = np.ones(len(z), dtype=bool)
    coef = np.zeros(6)
    for k in range(rounds):
        coef, *_ = np.linalg.lstsq(A[keep], z[keep], rcond=None)
        res = z - A @ coef
        thr = 0.25 if k == 0 else 0.1
        new_keep = np.abs(res) < thr
        if new_keep.sum() < 6:
            break
        keep = new_keep
    full = np.stack([np.ones_like(xs), xs, ys, xs * xs, ys * ys, xs * ys], axis=-1) @ coef
    res_grid = np.zeros(spec.shape)
    w = np.zeros(spec.shape)
    idx = np.flatnonzero(occ.reshape(-1))[keep]
    res_grid.reshape(-1)[idx] = (z - A @ coef)[keep]
    w.reshape(-1)[idx] = 1.0
    num = ndimage.uniform_filter(res_grid, smooth_cells, mode="constant")
    den = ndimage.uniform_filter(w, smooth_cells, mode="constant")
    corr = np.where(den > 1e-3, num / np.maximum(den, 1e-3), 0.0)
    return (full + corr).astype(np.float32)


def ground_features(bev: np.ndarray, spec: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Ground-net input (LiDAR channels + occupancy + prior) and the prior itself."""
    prior = robust_ground_prior(bev, spec)
    occ = (bev[2] > EMPTY_FILL + 1e-3).astype(np.float32)
    rel = np.where(occ > 0, bev[[0, 2]] - prior, 0.0) * HEIGHT_SCALE * 5.0
    feats = np.stack([rel[0], bev[1] - 0.3, rel[1], occ, prior * HEIGHT_SCALE]).astype(np.float32)
    return feats, prior


# -- networks --------------------------------------------------------------------------

class DeskGroundNet(Module):
    """Dense ground height from the LiDAR image.

    Three strided 3x3 convs, a pooled global-context branch (avg pool,
    1x1 conv, upsample), concat, two convs, upsample to full resolution,
    added to a parameter-free robust surface prior.
    """

    def __init__(self, spec: GridSpec, seed: int = 0, dtype=np.float32, context_pool: int = 15):
        super().__init__()
        self.spec = spec
        self.context_pool = context_pool
        rng = np.random.default_rng([seed, 11])
        self._conv("g1", 5, 16, 3, rng, dtype)
        self._conv("g2", 16, 16, 3, rng, dtype)
        self._conv("g3", 16, 8, 3, rng, dtype)
        self._conv("ctx", 8, 8, 1, rng, dtype)
        self._conv("g4", 16, 8, 3, rng, dtype)
        self._conv("g5", 8, 1, 3, rng, dtype, gain=0.01)

    def __call__(self, feats, prior):
        x = ad.relu(self.conv("g1", feats, stride=2))
        x = ad.relu(self.conv("g2", x, stride=2))
        x = ad.relu(self.conv("g3", x))
        qh, qw = x.shape[-2:]
        k = min(self.context_pool, qh, qw)
        ctx = ad.relu(self.conv("ctx", ad.avg_pool(x, k, k)))
        ctx = ad.bilinear_upsample(ctx, size=(qh, qw))
        x = ad.concat_channels([x, ctx])
        x = ad.relu(self.conv("g4", x))
        x = self.conv("g5", x)
        x = ad.bilinear_upsample(x, size=self.spec.shape)
        return ad.add(x, ad.Tensor(np.asarray(prior, dtype=x.dtype).reshape(x.shape)))


class DeskLaneNet(Module):
    """Two input branches (LiDAR, re-projected camera) without weight sharing.

    Each branch: conv 3x3 -> 16 at full resolution, conv 3x3 stride 2 -> 16.
    The branches are concatenated at half resolution and pass through an
    encoder down to 1/8 resolution (32 channels) whose output is upsampled
    and merged with skips at 1/4 and full resolution. A final conv emits
    the DT prediction. Receptive field is about 90 cells, enough to see
    the neighbouring boundary across a lane.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, tau: float = 30.0):
        super().__init__()
        rng = np.random.default_rng([seed, 12])
        self._conv("l1", 3, 16, 3, rng, dtype)
        self._conv("l2", 16, 16, 3, rng, dtype)
        self._conv("c1", 3, 16, 3, rng, dtype)
        self._conv("c2", 16, 16, 3, rng, dtype)
        self._conv("t1", 32, 32, 3, rng, dtype)
        self._conv("t2", 32, 32, 3, rng, dtype)
        self._conv("t3", 32, 32, 3, rng, dtype)
        self._conv("t4", 32, 16, 3, rng, dtype)
        self._conv("out", 16, 1, 3, rng, dtype, gain=0.1)
        self.params["out.b"].data[:] = tau / 4.0

    def __call__(self, lidar, camera):
        full = lidar.shape[-2:]
        l1 = ad.relu(self.conv("l1", lidar))
        l2 = ad.relu(self.conv("l2", l1, stride=2))
        c1 = ad.relu(self.conv("c1", camera))
        c2 = ad.relu(self.conv("c2", c1, stride=2))
        x = ad.concat_channels([l2, c2])
        q = ad.relu(self.conv("t1", x, stride=2))  # 1/4
        e = ad.relu(self.conv("t2", q, stride=2))  # 1/8
        e = ad.relu(self.conv("t3", e))
        x = ad.add(ad.bilinear_upsample(e, size=q.shape[-2:]), q)
        x = ad.relu(self.conv("t4", x))
        x = ad.bilinear_upsample(x, size=full)
        x = ad.relu(ad.add(x, ad.add(l1, c1)))
        return self.conv("out", x)


@dataclass
class Nets:
    ground: DeskGroundNet
    lane: DeskLaneNet

    def parameters(self) -> List[ad.Tensor]:
        return self.ground.parameters() + self.lane.parameters()

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"ground.{k}": v for k, v in self.ground.state_dict().items()}
        out.update({f"lane.{k}": v for k, v in self.lane.state_dict().items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.ground.load_state_dict({k[7:]: v for k, v in state.items() if k.startswith("ground.")})
        self.lane.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("lane.")})


def make_nets(spec: GridSpec, seed: int = 0, tau: float = 30.0, dtype=np.float32) -> Nets:
    return Nets(DeskGroundNet(spec, seed, dtype), DeskLaneNet(seed, dtype, tau))


# -- losses --------------------------------------------------------------------------------

def _check_shapes(a: ad.Tensor, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def lane_loss(pred, target: np.ndarray, weight: Optional[np.ndarray] = None) -> ad.Tensor:
    """Sum of squared differences to the (already inverted, truncated) DT target."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target)
    _check_shapes(pred, target)
    diff = pred.data.astype(np.float64) - target
    if weight is not None:
        diff = diff * weight
    out = np.asarray((diff * diff).sum())
    return ad.custom_op(out, (pred,), lambda g: ((2.0 * g * diff * (1.0 if weight is None else weight))
                                                 .astype(pred.dtype),), "lane_loss")


def ground_loss(pred, gt: np.ndarray) -> ad.Tensor:
    """Sum of absolute height errors; zero subgradient at exact ties."""
    pred = ad.as_tensor(pred)
    gt = np.asarray(gt)
    _check_shapes(pred, gt)
    diff = pred.data.astype(np.float64) - gt
    out = np.asarray(np.abs(diff).sum())
    return ad.custom_op(out, (pred,), lambda g: ((g * np.sign(diff)).astype(pred.dtype),), "ground_loss")


def total_loss(lane, gnd, lam: float = 20.0):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if isinstance(lane, ad.Tensor) or isinstance(gnd, ad.Tensor):
        return ad.add(ad.as_tensor(lane), ad.scale(ad.as_tensor(gnd), lam))
    return lane + lam * gnd


# -- pipeline --------------------------------------------------------------------------------

@dataclass
class PipelineOutput:
    ground: ad.Tensor  # N x 1 x rows x cols
    dt: ad.Tensor  # N x 1 x rows x cols
    valid: np.ndarray  # N x rows x cols
    warped: Optional[ad.Tensor]


def forward_pipeline(bev: np.ndarray, image, cams, spec: GridSpec, nets: Nets, mode: str = "both",
                     warp_ground: Optional[np.ndarray] = None) -> PipelineOutput:
    """Ground net on LiDAR, warp the camera onto the predicted ground, lane net on both.

    ``bev`` is N x 3 x rows x cols (raw LidarBev grids), ``image`` N x 3 x H x W.
    ``warp_ground`` substitutes another ground (e.g. ground truth) for the warp; a
    Tensor of shape N x 1 x rows x cols is used as-is so gradients can reach it.
    """
    if mode not in SENSOR_MODES:
        raise ValueError(f"mode must be one of {SENSOR_MODES}")
    bev = np.asarray(bev)
    if bev.ndim == 3:
        bev = bev[None]
    n = bev.shape[0]
    dtype = nets.lane.params["out.w"].dtype
    feats, priors = zip(*(ground_features(b, spec) for b in bev))
    gfeat = ad.Tensor(np.stack(feats).astype(dtype))
    ground = nets.ground(gfeat, np.stack(priors)[:, None])
    rows, cols = spec.shape
    zeros = np.zeros((n, 3, rows, cols), dtype=dtype)
    if mode == "camera":
        lidar_in = ad.Tensor(zeros)
    else:
        lidar_in = ad.Tensor(lidar_features(bev).astype(dtype))
    warped = None
    valid = np.zeros((n, rows, cols), dtype=bool)
    if mode == "lidar":
        cam_in = ad.Tensor(zeros)
    else:
        img = ad.as_tensor(image)
        if img.data.ndim == 3:
            img = ad.Tensor(img.data[None])
        img = ad.Tensor(img.data.astype(dtype), requires_grad=img.requires_grad)
        if warp_ground is None:
            g_used = ground
        elif isinstance(warp_ground, ad.Tensor):
            g_used = warp_ground
        else:
            g_used = ad.Tensor(np.asarray(warp_ground, dtype=dtype).reshape(n, 1, rows, cols))
        warped, valid = backproject_op(img, g_used, cams, spec)
        shift = np.broadcast_to(np.where(valid[:, None], -0.4, 0.0), warped.shape).astype(dtype)
        cam_in = ad.add(warped, ad.Tensor(shift))
    dt = nets.lane(lidar_in, cam_in)
    return PipelineOutput(ground, dt, valid, warped)


# -- training --------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lam: float = 20.0
    tau: float = 30.0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    mode: str = "both"
    augment: bool = True
    max_yaw_deg: float = 5.0
    photometric: bool = True
    valid_only_loss: bool = False
    threshold: float = 20.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mode not in SENSOR_MODES:
            raise ValueError(f"mode must be one of {SENSOR_MODES}")

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        kv = parse_keyvalues(text)
        types = {f.name: f.type for f in fields(cls)}
        aliases = {"lambda": "lam", "sensor_mode": "mode"}
        kwargs = {}
        for key, value in kv.items():
            name = aliases.get(key, key)
            if name not in types:
                raise ValueError(f"unknown config key {key!r}")
            default = getattr(cls(), name)
            if isinstance(default, bool):
                kwargs[name] = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kwargs[name] = int(value)
            elif isinstance(default, float):
                kwargs[name] = float(value)
            else:
                kwargs[name] = value
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            key = {"lam": "lambda"}.get(f.name, f.name)
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lane: float
    gnd: float


@dataclass
class TrainResult:
    nets: Nets
    best_state: Dict[str, np.ndarray]
    log: List[EpochLog]
    best_epoch: int
    best_val: float


def _batch(samples: Sequence[Sample]):
    bev = np.stack([s.bev for s in samples])
    image = np.stack([s.image for s in samples])
    cams = [s.cam for s in samples]
    ground = np.stack([s.ground for s in samples])[:, None]
    target = np.stack([s.target for s in samples])[:, None]
    return bev, image, cams, ground, target


def batch_losses(nets: Nets, samples: Sequence[Sample], spec: GridSpec, cfg: TrainConfig,
                 warp_ground: bool = False):
    """Forward one batch; returns (total, lane, gnd) tensors averaged over items, and the output."""
    bev, image, cams, ground, target = _batch(samples)
    out = forward_pipeline(bev, image, cams, spec, nets, cfg.mode,
                           warp_ground=ground if warp_ground else None)
    weight = out.valid[:, None].astype(np.float64) if (cfg.valid_only_loss and cfg.mode == "camera") else None
    n = len(samples)
    lane = ad.scale(lane_loss(out.dt, target, weight), 1.0 / n)
    gnd = ad.scale(ground_loss(out.ground, ground), 1.0 / n)
    return total_loss(lane, gnd, cfg.lam), lane, gnd, out


def _sub_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([seed, sum(ord(c) * 131 ** i for i, c in enumerate(stream)) % (2 ** 32)])


def evaluate_loss(nets: Nets, samples: Sequence[Sample], spec: GridSpec, cfg: TrainConfig) -> Tuple[float, float, float]:
    tot = lane = gnd = 0.0
    for k in range(0, len(samples), cfg.batch_size):
        chunk = samples[k:k + cfg.batch_size]
        t, l, g, _ = batch_losses(nets, chunk, spec, cfg)
        w = len(chunk)
        tot += t.item() * w
        lane += l.item() * w
        gnd += g.item() * w
    n = max(len(samples), 1)
    return tot / n, lane / n, gnd / n


def train(train_records: Sequence[SceneRecord], val_records: Sequence[SceneRecord], spec: GridSpec,
          cfg: TrainConfig, nets: Optional[Nets] = None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Adam on lane + lambda * ground loss with early stopping on validation loss."""
    if not train_records or not val_records:
        raise ValueError("train and validation splits must be non-empty")
    nets = nets or make_nets(spec, cfg.seed, cfg.tau)
    opt = ad.Adam(nets.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    order_rng = _sub_rng(cfg.seed, "order")
    aug_rng = _sub_rng(cfg.seed, "augment")
    val_samples = [build_sample(r, spec, cfg.tau) for r in val_records]
    static = None if cfg.augment else [build_sample(r, spec, cfg.tau) for r in train_records]
    history: List[EpochLog] = []
    best_val, best_epoch, best_state = math.inf, -1, nets.state_dict()
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train_records))
        tot = lane_sum = gnd_sum = 0.0
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            if static is not None:
                batch = [static[i] for i in idx]
            else:
                batch = []
                for i in idx:
                    yaw = math.radians(aug_rng.uniform(-cfg.max_yaw_deg, cfg.max_yaw_deg))
                    pseed = int(aug_rng.integers(2 ** 32)) if cfg.photometric else None
                    batch.append(build_sample(train_records[i], spec, cfg.tau, yaw, pseed))
            with ad.Tape() as tape:
                t, l, g, _ = batch_losses(nets, batch, spec, cfg)
            if not np.isfinite(t.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {k // cfg.batch_size}")
            opt.zero_grad()
            ad.backward(tape, t)
            opt.step()
            tot += t.item() * len(idx)
            lane_sum += l.item() * len(idx)
            gnd_sum += g.item() * len(idx)
        n = len(order)
        val, _, _ = evaluate_loss(nets, val_samples, spec, cfg)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        entry = EpochLog(epoch, tot / n, val, lane_sum / n, gnd_sum / n)
        history.append(entry)
        log.info("epoch %d train %.1f val %.1f", epoch, entry.train_loss, val)
        if on_epoch:
            on_epoch(entry)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, nets.state_dict()
        elif epoch - best_epoch >= cfg.patience:
            break
    nets.load_state_dict(best_state)
    return TrainResult(nets, best_state, history, best_epoch, best_val)


def predict(nets: Nets, samples: Sequence[Sample], spec: GridSpec, mode: str = "both",
            true_ground: bool = False, batch_size: int = 8):
    """DT predictions, ground predictions and warped images for a list of samples."""
    dts, grounds, warps = [], [], []
    for k in range(0, len(samples), batch_size):
        chunk = samples[k:k + batch_size]
        bev, image, cams, ground, _ = _batch(chunk)
        out = forward_pipeline(bev, image, cams, spec, nets, mode, warp_ground=ground if true_ground else None)
        dts.extend(out.dt.data[:, 0])
        grounds.extend(out.ground.data[:, 0])
        warps.extend(out.warped.data if out.warped is not None else [None] * len(chunk))
    return dts, grounds, warps


def evaluate_records(nets: Nets, records: Sequence[SceneRecord], spec: GridSpec, tau: float,
                     threshold: float, mode: str = "both", true_ground: bool = False,
                     config: Optional[dict] = None, batch_size: int = 8):
    """Predict, skeletonize and score every record; returns (MetricsReport, per-scene metrics)."""
    per_scene = []
    for k in range(0, len(records), batch_size):
        samples = [build_sample(r, spec, tau) for r in records[k:k + batch_size]]
        dts, _, _ = predict(nets, samples, spec, mode, true_ground, batch_size)
        for s, dt in zip(samples, dts):
            skel = extract_skeleton(dt, threshold)
            per_scene.append(evaluate_scene(dt, s.target, skel, s.gt_mask, s.lanes, spec))
    cfg = {"tau": tau, "threshold": threshold, "sensor_mode": mode, "true_ground": true_ground,
           "grid": spec.to_json(), "bins": [list(b) for b in default_bins(spec)]}
    cfg.update(config or {})
    return aggregate(per_scene, cfg), per_scene


def save_checkpoint(directory, nets: Nets, meta: dict) -> None:
    d = Path(directory)
    save_tensors(d, nets.state_dict())
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> Tuple[Nets, dict]:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    spec = GridSpec.from_json(meta["grid"])
    nets = make_nets(spec, 0, meta.get("tau", 30.0))
    nets.load_state_dict(load_tensors(d))
    return nets, meta
