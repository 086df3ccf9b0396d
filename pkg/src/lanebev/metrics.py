"""Evaluation protocol: DT errors, chamfer precision/recall, AP, topology."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dt_label import LaneGraph, euclidean_dt
from .geometry import GridSpec
from .postprocess import Skeleton

AP_TOLERANCES = tuple(range(1, 10))
REPORT_TOLERANCE = 5


def _mask(m) -> np.ndarray:
    return np.asarray(m.mask if isinstance(m, Skeleton) else m, dtype=bool)


def dt_error(pred: np.ndarray, target: np.ndarray, resolution: float = 0.05) -> Tuple[float, float]:
    """Mean absolute (cm) and mean squared (cm^2) per-cell DT error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    cm = resolution * 100.0
    diff = (pred - target) * cm
    return float(np.abs(diff).mean()), float((diff * diff).mean())


def _within(points: np.ndarray, reference: np.ndarray, tolerances: Sequence[float]) -> List[int]:
    """Count of ``points`` cells within each tolerance of any ``reference`` cell."""
    if not points.any():
        return [0 for _ in tolerances]
    if not reference.any():
        return [0 for _ in tolerances]
    d = euclidean_dt(reference)[points]
    return [int((d <= t).sum()) for t in tolerances]


def chamfer_pr_multi(pred, gt, tolerances: Sequence[float], region: Optional[np.ndarray] = None):
    """Precision and recall lists over several tolerances (one DT per direction).

    ``region`` restricts which predicted / ground-truth cells are scored
    while distances are still measured against the full other set.
    """
    p, g = _mask(pred), _mask(gt)
    ps = p & region if region is not None else p
    gs = g & region if region is not None else g
    n_p, n_g = int(ps.sum()), int(gs.sum())
    hits_p = _within(ps, g, tolerances)
    hits_g = _within(gs, p, tolerances)
    precision, recall = [], []
    for hp, hg in zip(hits_p, hits_g):
        if n_g == 0:
            precision.append(0.0 if n_p else 1.0)
            recall.append(1.0)
            continue
        precision.append(hp / n_p if n_p else 1.0)
        recall.append(hg / n_g)
    return precision, recall


def chamfer_pr(pred, gt, tolerance: float) -> Tuple[float, float]:
    """Precision: share of predicted cells within ``tolerance`` px of ground truth;
    recall: share of ground-truth cells within ``tolerance`` px of a prediction.

    Empty prediction: precision 1, recall 0. Empty ground truth: precision 0
    if anything is predicted (1 otherwise), recall 1.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    p, r = chamfer_pr_multi(pred, gt, [tolerance])
    return p[0], r[0]


def ap(pred, gt, tolerances: Sequence[float] = AP_TOLERANCES, region=None) -> float:
    """Mean chamfer precision over the pixel tolerances 1..9."""
    p, _ = chamfer_pr_multi(pred, gt, tolerances, region)
    return float(np.mean(p))


def topology_deviation(pred_skel: Skeleton, lanes: LaneGraph) -> int:
    return abs(int(pred_skel.component_count) - int(lanes.lane_count))


def default_bins(spec: GridSpec, width: float = 8.0) -> List[Tuple[float, float]]:
    lo, hi = spec.x_range
    edges = list(np.arange(lo, hi, width)) + [hi]
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]) if b - a > 1e-9]


def ap_by_distance(pred, gt, spec: GridSpec, bins: Optional[Sequence[Tuple[float, float]]] = None):
    """AP (and recall at 5 px) of cells falling in each forward-distance bin."""
    bins = default_bins(spec) if bins is None else bins
    xs = spec.origin[0] + spec.resolution * np.arange(spec.rows)
    out = []
    for a, b in bins:
        region = np.zeros(spec.shape, dtype=bool)
        region[(xs >= a) & (xs < b)] = True
        p, r = chamfer_pr_multi(pred, gt, AP_TOLERANCES, region)
        out.append({"bin": [a, b], "ap": float(np.mean(p)),
                    "recall_at_5": r[REPORT_TOLERANCE - 1],
                    "n_pred": int((_mask(pred) & region).sum()),
                    "n_gt": int((_mask(gt) & region).sum())})
    return out


@dataclass
class SceneMetrics:
    dt_l1: float
    dt_l2: float
    ap: float
    precision_at: Dict[int, float]
    recall_at: Dict[int, float]
    topology_dev: int
    ap_by_distance: List[dict]


def evaluate_scene(pred_dt: np.ndarray, target: np.ndarray, skel: Skeleton, gt_mask: np.ndarray,
                   lanes: LaneGraph, spec: GridSpec, bins=None) -> SceneMetrics:
    l1, l2 = dt_error(pred_dt, target, spec.resolution)
    prec, rec = chamfer_pr_multi(skel, gt_mask, AP_TOLERANCES)
    return SceneMetrics(l1, l2, float(np.mean(prec)),
                        {t: prec[k] for k, t in enumerate(AP_TOLERANCES)},
                        {t: rec[k] for k, t in enumerate(AP_TOLERANCES)},
                        topology_deviation(skel, lanes),
                        ap_by_distance(skel, gt_mask, spec, bins))


@dataclass
class MetricsReport:
    dt_l1: float
    dt_l2: float
    ap: float
    precision_at: Dict[int, float]
    recall_at: Dict[int, float]
    topology_mean_dev: float
    ap_by_distance: List[dict]
    n_scenes: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"dt_l1_cm": self.dt_l1, "dt_l2_cm2": self.dt_l2, "ap": self.ap,
                "precision_at": {str(k): v for k, v in self.precision_at.items()},
                "recall_at": {str(k): v for k, v in self.recall_at.items()},
                "precision_at_5px": self.precision_at[REPORT_TOLERANCE],
                "recall_at_5px": self.recall_at[REPORT_TOLERANCE],
                "topology_mean_dev": self.topology_mean_dev,
                "ap_by_distance": self.ap_by_distance, "n_scenes": self.n_scenes,
                "config": self.config}


def aggregate(scenes: Sequence[SceneMetrics], config: Optional[dict] = None) -> MetricsReport:
    """Dataset-level means, in scene order."""
    if not scenes:
        raise ValueError("no scenes to aggregate")
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    nb = len(scenes[0].ap_by_distance)
    bins = []
    for k in range(nb):
        entries = [s.ap_by_distance[k] for s in scenes]
        bins.append({"bin": entries[0]["bin"], "ap": mean([e["ap"] for e in entries]),
                     "recall_at_5": mean([e["recall_at_5"] for e in entries])})
    return MetricsReport(
        dt_l1=mean([s.dt_l1 for s in scenes]), dt_l2=mean([s.dt_l2 for s in scenes]),
        ap=mean([s.ap for s in scenes]),
        precision_at={t: mean([s.precision_at[t] for s in scenes]) for t in AP_TOLERANCES},
        recall_at={t: mean([s.recall_at[t] for s in scenes]) for t in AP_TOLERANCES},
        topology_mean_dev=mean([s.topology_dev for s in scenes]),
        ap_by_distance=bins, n_scenes=len(scenes), config=dict(config or {}))
