"""Lane-boundary regression targets: inverted, truncated Euclidean distance transforms."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np

from .geometry import GridSpec

HIGHWAY_TAU = 30.0
CITY_TAU = 20.0


@dataclass
class LaneGraph:
    boundaries: List[np.ndarray] = field(default_factory=list)  # each K x 3, vehicle frame
    lane_count: int = 0

    def __post_init__(self):
        self.boundaries = [np.asarray(b, dtype=np.float64).reshape(-1, 3) for b in self.boundaries]
        for b in self.boundaries:
            if len(b) < 2:
                raise ValueError("each boundary polyline needs at least two vertices")
        if self.lane_count < 0:
            raise ValueError("lane_count must be non-negative")

    def to_json(self) -> dict:
        return {"boundaries": [b.tolist() for b in self.boundaries], "lane_count": int(self.lane_count)}

    @classmethod
    def from_json(cls, d: dict) -> "LaneGraph":
        return cls([np.asarray(b, dtype=np.float64) for b in d["boundaries"]], int(d["lane_count"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LaneGraph":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class DtTarget:
    grid: np.ndarray
    tau: float


def _segment_cells(r0, c0, r1, c1, rows, cols, out):
    """Mark every cell a straight segment passes through (in fractional cell coords)."""
    dr, dc = r1 - r0, c1 - c0
    ts = [np.array([0.0, 1.0])]
    # cell boundaries sit at half-integers
    if dr != 0.0:
        lo, hi = sorted((r0, r1))
        k = np.arange(np.ceil(lo - 0.5), np.floor(hi - 0.5) + 1) + 0.5
        ts.append((k - r0) / dr)
    if dc != 0.0:
        lo, hi = sorted((c0, c1))
        k = np.arange(np.ceil(lo - 0.5), np.floor(hi - 0.5) + 1) + 0.5
        ts.append((k - c0) / dc)
    t = np.unique(np.clip(np.concatenate(ts), 0.0, 1.0))
    # one probe inside every sub-interval, plus both endpoints
    probes = np.concatenate([(t[:-1] + t[1:]) / 2.0, [0.0, 1.0]])
    i = np.floor(r0 + probes * dr + 0.5).astype(np.int64)
    j = np.floor(c0 + probes * dc + 0.5).astype(np.int64)
    ok = (i >= 0) & (i < rows) & (j >= 0) & (j < cols)
    out[i[ok], j[ok]] = True


def rasterize_lanes(lanes: LaneGraph, spec: GridSpec) -> np.ndarray:
    """Supercover rasterization of all boundary segments in the overhead plane."""
    mask = np.zeros(spec.shape, dtype=bool)
    for poly in lanes.boundaries:
        r, c = spec.to_continuous(poly[:, 0], poly[:, 1])
        for k in range(len(poly) - 1):
            _segment_cells(r[k], c[k], r[k + 1], c[k + 1], spec.rows, spec.cols, mask)
    return mask


def _lower_envelope_1d(f: np.ndarray) -> np.ndarray:
    """Squared-distance transform of a sampled function (lower envelope of parabolas).

    ``f`` holds 0 at seeds and +inf elsewhere (or any partial result from a
    previous pass). All arithmetic on finite values stays integral.
    """
    n = len(f)
    d = np.empty(n)
    finite = np.flatnonzero(np.isfinite(f))
    if len(finite) == 0:
        d.fill(np.inf)
        return d
    fl = f.tolist()
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    v[0] = int(finite[0])
    z[0] = -np.inf
    z[1] = np.inf
    for q in finite[1:].tolist():
        fq = fl[q] + q * q
        while True:
            p = v[k]
            s = (fq - (fl[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + fl[p]
    return d


def squared_edt(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (in cells) to the nearest true cell."""
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    if not mask.any():
        return np.full(mask.shape, np.inf)
    # Pass 1 along columns: 1-D distance to the nearest seed in each column.
    idx = np.arange(rows)[:, None]
    big = rows + cols + 1
    prev = np.where(mask, idx, -big)
    prev = np.maximum.accumulate(prev, axis=0)
    nxt = np.where(mask, idx, 2 * big + rows)
    nxt = np.minimum.accumulate(nxt[::-1], axis=0)[::-1]
    dcol = np.minimum(idx - prev, nxt - idx).astype(np.float64)
    g = np.where(dcol < big, dcol * dcol, np.inf)
    # Pass 2 along rows: lower envelope.
    out = np.empty_like(g)
    for i in range(rows):
        out[i] = _lower_envelope_1d(g[i])
    return out


def euclidean_dt(mask: np.ndarray) -> np.ndarray:
    """Distance in cell units from each cell center to the nearest true cell; +inf if none."""
    return np.sqrt(squared_edt(mask))


def truncate_invert(dt: np.ndarray, tau: float) -> DtTarget:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return DtTarget(tau - np.minimum(np.asarray(dt, dtype=np.float64), tau), float(tau))


def lane_target(lanes: LaneGraph, spec: GridSpec, tau: float):
    """Boundary mask and inverted truncated DT target for one lane graph."""
    mask = rasterize_lanes(lanes, spec)
    return mask, truncate_invert(euclidean_dt(mask), tau)
