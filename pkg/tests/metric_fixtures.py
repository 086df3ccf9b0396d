"""Hand-constructed metric fixtures with values worked out by hand."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from lanebev.dt_label import LaneGraph
from lanebev.metrics import ap, chamfer_pr, topology_deviation
from lanebev.postprocess import skeletonize

SHAPE = (40, 40)


def hline(row: int, c0: int = 5, c1: int = 35) -> np.ndarray:
    m = np.zeros(SHAPE, dtype=bool)
    m[row, c0:c1] = True
    return m


def diag(offset: int, n: int = 30) -> np.ndarray:
    m = np.zeros(SHAPE, dtype=bool)
    i = np.arange(n)
    m[i + 2, i + 2 + offset] = True
    return m


@dataclass
class Fixture:
    name: str
    pred: np.ndarray
    gt: np.ndarray
    pr: Dict[float, Tuple[float, float]]  # tolerance -> (precision, recall)
    ap: Optional[float] = None
    lanes: Optional[int] = None
    topology: Optional[int] = None
    notes: List[str] = field(default_factory=list)


def fixtures() -> List[Fixture]:
    empty = np.zeros(SHAPE, dtype=bool)
    two = hline(8) | hline(30)
    five = np.zeros(SHAPE, dtype=bool)
    for r in (2, 10, 18, 26, 34):
        five[r, 5:35] = True
    return [
        Fixture("identical line", hline(20), hline(20),
                {t: (1.0, 1.0) for t in range(0, 10)}, ap=1.0, lanes=1, topology=0),
        Fixture("line shifted 3 px", hline(23), hline(20),
                {0: (0.0, 0.0), 2: (0.0, 0.0), 3: (1.0, 1.0), 9: (1.0, 1.0)}, ap=7 / 9),
        Fixture("line shifted 5 px", hline(25), hline(20),
                {4: (0.0, 0.0), 5: (1.0, 1.0)}, ap=5 / 9),
        # first 15 of 30 cells predicted; gt cell k (k >= 15) is k - 14 px from the last prediction
        Fixture("half the line predicted", hline(20, 5, 20), hline(20),
                {0: (1.0, 0.5), 3: (1.0, 18 / 30), 9: (1.0, 24 / 30)}, ap=1.0),
        Fixture("empty prediction", empty, hline(20),
                {0: (1.0, 0.0), 5: (1.0, 0.0)}, ap=1.0),
        Fixture("empty ground truth", hline(20), empty,
                {0: (0.0, 1.0), 5: (0.0, 1.0)}, ap=0.0),
        Fixture("both empty", empty, empty, {0: (1.0, 1.0), 5: (1.0, 1.0)}, ap=1.0, lanes=0, topology=0),
        # gt has two far-apart lines; prediction recovers only the top one
        Fixture("one of two components", hline(8), two,
                {0: (1.0, 0.5), 9: (1.0, 0.5)}, ap=1.0, lanes=2, topology=1),
        # diagonal shifted two columns: interior cells are sqrt(2) apart, end cells 2 apart
        Fixture("diagonal shifted 2 columns", diag(2), diag(0),
                {1: (0.0, 0.0), 1.5: (29 / 30, 29 / 30), 2: (1.0, 1.0)}, ap=8 / 9),
        Fixture("five components vs three lanes", five, five,
                {0: (1.0, 1.0)}, ap=1.0, lanes=3, topology=2),
    ]


def check(fx: Fixture) -> List[str]:
    """Mismatches between computed and hand values (exact float equality)."""
    bad = []
    for tol, want in fx.pr.items():
        got = chamfer_pr(fx.pred, fx.gt, tol)
        if got != want:
            bad.append(f"{fx.name}: chamfer_pr tol {tol} -> {got}, expected {want}")
    if fx.ap is not None:
        got = ap(fx.pred, fx.gt)
        if abs(got - fx.ap) > 1e-12:
            bad.append(f"{fx.name}: ap {got}, expected {fx.ap}")
    if fx.topology is not None:
        got = topology_deviation(skeletonize(fx.pred), LaneGraph([], fx.lanes))
        if got != fx.topology:
            bad.append(f"{fx.name}: topology {got}, expected {fx.topology}")
    return bad
