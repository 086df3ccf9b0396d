"""From DT predictions to lane skeletons."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

HIGHWAY_THRESHOLD = 20.0
CITY_THRESHOLD = 15.0

# Neighbour offsets P2..P9, clockwise from north.
_NBRS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


@dataclass
class Skeleton:
    mask: np.ndarray
    component_count: int


def binarize(pred: np.ndarray, threshold: float) -> np.ndarray:
    return np.asarray(pred) >= threshold


def _neighbours(img: np.ndarray):
    p = np.pad(img, 1)
    h, w = img.shape
    return [p[1 + di:1 + di + h, 1 + dj:1 + dj + w] for di, dj in _NBRS]


def _conditions(n, first: bool):
    """Zhang-Suen deletion test from the 8 neighbour planes (P2..P9)."""
    nb = [x.astype(np.int8) for x in n]
    b = sum(nb)
    a = sum(((nb[k] == 0) & (nb[(k + 1) % 8] == 1)).astype(np.int8) for k in range(8))
    p2, p3, p4, p5, p6, p7, p8, p9 = nb
    if first:
        c = (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
    else:
        c = (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
    return (b >= 2) & (b <= 6) & (a == 1) & c


def _local_ok(img: np.ndarray, i: int, j: int, first: bool) -> bool:
    h, w = img.shape
    nb = []
    for di, dj in _NBRS:
        y, x = i + di, j + dj
        nb.append(1 if (0 <= y < h and 0 <= x < w and img[y, x]) else 0)
    b = sum(nb)
    if b < 2 or b > 6:
        return False
    if sum(1 for k in range(8) if nb[k] == 0 and nb[(k + 1) % 8] == 1) != 1:
        return False
    p2, p3, p4, p5, p6, p7, p8, p9 = nb
    if first:
        return p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
    return p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0


def thin(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration Zhang-Suen thinning.

    Candidates of each subiteration are found in parallel and then deleted
    in raster order, re-checking each against the partially thinned image.
    A pixel is only removed when its foreground neighbours form a single
    run with 2..6 members, which keeps 8-connected components intact
    (including 2x2 blocks and 2-pixel-thick diagonals that the purely
    parallel scheme erases).
    """
    img = np.asarray(mask, dtype=bool).copy()
    while True:
        changed = False
        for first in (True, False):
            cand = img & _conditions(_neighbours(img), first)
            if not cand.any():
                continue
            for i, j in zip(*np.nonzero(cand)):
                if _local_ok(img, i, j, first):
                    img[i, j] = False
                    changed = True
        if not changed:
            return img


def connected_components(mask: np.ndarray) -> Tuple[int, np.ndarray]:
    """8-connected labels 1..n, numbered in row-major order of first appearance."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0, labels
    flat = labels.reshape(-1)
    nz = np.flatnonzero(flat)
    first_pos = np.full(n + 1, np.iinfo(np.int64).max)
    np.minimum.at(first_pos, flat[nz], nz)
    order = np.argsort(first_pos[1:], kind="stable") + 1
    remap = np.zeros(n + 1, dtype=labels.dtype)
    remap[order] = np.arange(1, n + 1)
    return int(n), remap[labels]


def skeletonize(mask: np.ndarray) -> Skeleton:
    sk = thin(mask)
    n, _ = connected_components(sk)
    return Skeleton(sk, n)


def extract_skeleton(pred: np.ndarray, threshold: float) -> Skeleton:
    return skeletonize(binarize(pred, threshold))
