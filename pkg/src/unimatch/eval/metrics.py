"""Princeton-protocol geodesic error and PCK curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from ..fmap import PointMap
from ..mesh import TriangleMesh, geodesic_distances


@dataclass(frozen=True)
class GeodesicErrors:
    errors: np.ndarray  # per source vertex; NaN where not evaluated
    mean: float
    n_evaluated: int
    n_unmatched: int  # gt defined but prediction is NONE


def geodesic_error(pred: PointMap, gt_target, mesh_y: TriangleMesh, dist: np.ndarray | None = None) -> GeodesicErrors:
    """Area-normalized geodesic distance on Y between predicted and true targets.

    ``gt_target[i]`` is the true Y vertex for source vertex i, or -1 when the
    ground truth is undefined. Unmatched predictions are counted separately and
    left out of the mean. ``dist`` may hold precomputed all-pairs distances.
    """
    gt = np.asarray(gt_target, dtype=np.int64)
    if len(gt) != pred.n_source:
        raise DimensionError(f"ground truth covers {len(gt)} vertices, prediction {pred.n_source}")
    if pred.n_target != mesh_y.n:
        raise DimensionError("prediction target size does not match mesh_y")
    defined = gt >= 0
    unmatched = defined & ~pred.matched
    ev = defined & pred.matched
    errors = np.full(len(gt), np.nan)
    if ev.any():
        if dist is None:
            sources = np.unique(gt[ev])
            rows = geodesic_distances(mesh_y, sources)
            lookup = np.searchsorted(sources, gt[ev])
            errors[ev] = rows[lookup, pred.target[ev]]
        else:
            errors[ev] = dist[gt[ev], pred.target[ev]]
    mean = float(np.nanmean(errors)) if ev.any() else float("nan")
    return GeodesicErrors(errors, mean, int(ev.sum()), int(unmatched.sum()))


@dataclass(frozen=True)
class PckCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def rows(self):
        for t, f in zip(self.thresholds, self.fractions):
            yield f"threshold={t:.6g} pck={f:.6g}"


def pck(errors, thresholds) -> PckCurve:
    """Fraction of errors at or below each threshold (NaNs ignored)."""
    e = np.asarray(errors, dtype=np.float64)
    e = e[~np.isnan(e)]
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise DimensionError("thresholds must be nondecreasing")
    if e.size == 0:
        return PckCurve(t, np.zeros_like(t))
    frac = np.searchsorted(np.sort(e), t, side="right") / e.size
    return PckCurve(t, frac)


def random_matching_error(gt_target, mesh_y: TriangleMesh, seed: int = 0, dist=None) -> float:
    """Mean error of a uniformly random point map on the same ground truth."""
    rng = np.random.default_rng(seed)
    gt = np.asarray(gt_target)
    pred = PointMap(rng.integers(0, mesh_y.n, size=len(gt)), mesh_y.n)
    return geodesic_error(pred, gt, mesh_y, dist).mean
