"""Running-mean aggregation of per-cell outputs across frames under ego-motion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import GridSpec, Pose

COUNT_CAP = 100.0


@dataclass
class Accumulator:
    values: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, spec: GridSpec) -> "Accumulator":
        return cls(np.zeros(spec.shape), np.zeros(spec.shape))

    def to_tensors(self) -> dict:
        return {"values": self.values.astype(np.float64), "counts": self.counts.astype(np.float64)}


def sample_bilinear(grid: np.ndarray, r: np.ndarray, c: np.ndarray, mode: str = "zero") -> np.ndarray:
    """Bilinear lookup at fractional (row, col); ``mode`` is "zero" or "clamp" outside."""
    h, w = grid.shape
    if mode == "clamp":
        r = np.clip(r, 0.0, h - 1)
        c = np.clip(c, 0.0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr, fc = r - r0, c - c0
    out = np.zeros(np.shape(r), dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ri, ci = r0 + dr, c0 + dc
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        out += np.where(ok, grid[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)], 0.0) * wgt
    return out


def warp_accumulator(acc: Accumulator, motion: Pose, spec: GridSpec,
                     ground: Optional[np.ndarray] = None) -> Accumulator:
    """Resample the previous accumulator into the current frame.

    ``motion`` maps current-frame points into the previous frame. Cell
    centers are lifted to ``ground`` (flat z = 0 by default), moved, and
    their z is dropped before bilinear lookup with zero padding.
    """
    xs, ys = spec.cell_centers()
    zs = np.zeros(spec.shape) if ground is None else np.asarray(ground, dtype=np.float64)
    prev = motion.apply(np.stack([xs, ys, zs], axis=-1))
    r, c = spec.to_continuous(prev[..., 0], prev[..., 1])
    # snap round-off so lattice-aligned motions hit cell centers exactly
    r = np.where(np.abs(r - np.rint(r)) < 1e-9, np.rint(r), r)
    c = np.where(np.abs(c - np.rint(c)) < 1e-9, np.rint(c), c)
    return Accumulator(sample_bilinear(acc.values, r, c), sample_bilinear(acc.counts, r, c))


def aggregate(acc_warped: Accumulator, observation: np.ndarray, visible: np.ndarray,
              count_cap: float = COUNT_CAP) -> Accumulator:
    """Fold one observation into the running mean on visible cells."""
    y = np.asarray(observation, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    if y.shape != acc_warped.values.shape or vis.shape != y.shape:
        raise ValueError("observation, visibility and accumulator shapes differ")
    n = np.minimum(acc_warped.counts, count_cap)
    values = np.where(vis, (n * acc_warped.values + y) / (n + 1.0), acc_warped.values)
    counts = np.where(vis, n + 1.0, acc_warped.counts)
    return Accumulator(values, counts)


def step(acc: Accumulator, motion: Pose, spec: GridSpec, observation: np.ndarray,
         visible: np.ndarray, ground: Optional[np.ndarray] = None) -> Accumulator:
    return aggregate(warp_accumulator(acc, motion, spec, ground), observation, visible)
