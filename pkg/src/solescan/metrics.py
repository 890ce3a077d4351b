"""Chamfer and Hausdorff distances between point sets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput
from .geometry import NearestNeighborIndex, PointCloud


@dataclass(frozen=True)
class ChamferReport:
    cd: float
    directed_pq: float
    directed_qp: float
    squared: bool


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInput("distance between empty point sets is undefined")
    return pts


def nn_distances(src, dst) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest point in ``dst``."""
    return NearestNeighborIndex(_points(dst)).query(_points(src))[1]


def _mean(values: np.ndarray) -> float:
    # fsum is exact-rounded, so the result does not depend on summation order
    return math.fsum(values.tolist()) / len(values)


def chamfer(p, q, squared: bool = False) -> ChamferReport:
    d_pq = nn_distances(p, q)
    d_qp = nn_distances(q, p)
    if squared:
        d_pq, d_qp = d_pq * d_pq, d_qp * d_qp
    a, b = _mean(d_pq), _mean(d_qp)
    return ChamferReport(a + b, a, b, squared)


def hausdorff(p, q) -> float:
    return float(max(nn_distances(p, q).max(), nn_distances(q, p).max()))


def coverage(reference, samples, eps: float) -> float:
    """Fraction of ``reference`` points within ``eps`` of some point of ``samples``."""
    return float(np.mean(nn_distances(reference, samples) <= eps))
