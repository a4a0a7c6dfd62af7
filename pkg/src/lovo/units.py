"""Partition scans into geometric units (rectangular sub-region blocks).

Each unit carries the summary statistics (centroid, scatter) that the
classical pipeline uses in place of learned sub-region features.  Grids are
anchored at the coordinate origin; a unit's frame offset is the geometric
center of its cell.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud_io import PointCloud
from .errors import InvalidSizeError, MaxLevelError

MAX_LEVEL = 3


@dataclass(frozen=True)
class GeometricUnit:
    unit_key: tuple[int, int, int]
    offset_v: np.ndarray          # cell center in the sensor frame (= unit frame origin)
    point_indices: np.ndarray     # indices into the parent cloud
    centroid: np.ndarray
    scatter: np.ndarray           # (3,3) empirical covariance, (n-1) denominator
    point_count: int


@dataclass(frozen=True)
class UnitGrid:
    units: dict[tuple[int, int, int], GeometricUnit]
    unit_size: np.ndarray
    level: int = 1

    def __len__(self) -> int:
        return len(self.units)

    def sorted_units(self) -> list[GeometricUnit]:
        return [self.units[k] for k in sorted(self.units)]


def _group_stats(points: np.ndarray, inverse: np.ndarray, n_groups: int):
    """Per-group count, centroid and (n-1)-normalized scatter."""
    counts = np.bincount(inverse, minlength=n_groups).astype(np.float64)
    sums = np.stack(
        [np.bincount(inverse, weights=points[:, a], minlength=n_groups) for a in range(3)],
        axis=1,
    )
    centroids = sums / counts[:, None]
    # raw second moments, then subtract n * c c^T
    prods = points[:, :, None] * points[:, None, :]
    second = np.stack(
        [
            np.bincount(inverse, weights=prods[:, a, b], minlength=n_groups)
            for a in range(3)
            for b in range(3)
        ],
        axis=1,
    ).reshape(n_groups, 3, 3)
    centered = second - counts[:, None, None] * (centroids[:, :, None] * centroids[:, None, :])
    denom = np.maximum(counts - 1.0, 1.0)
    scatter = centered / denom[:, None, None]
    scatter[counts < 2] = 0.0
    # enforce exact symmetry against float round-off
    scatter = 0.5 * (scatter + scatter.transpose(0, 2, 1))
    return counts.astype(np.int64), centroids, scatter


def partition(cloud: PointCloud, unit_size) -> UnitGrid:
    """Assign every point to exactly one unit and compute unit statistics."""
    unit_size = np.asarray(unit_size, dtype=np.float64).reshape(3)
    if np.any(unit_size <= 0):
        raise InvalidSizeError(f"unit_size must be positive per axis, got {unit_size}")
    units: dict[tuple[int, int, int], GeometricUnit] = {}
    if len(cloud) == 0:
        return UnitGrid(units, unit_size, level=1)
    keys = np.floor(cloud.points / unit_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts, centroids, scatter = _group_stats(cloud.points, inverse, uniq.shape[0])
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    for g in range(uniq.shape[0]):
        key = tuple(int(v) for v in uniq[g])
        members = order[starts[g] : starts[g + 1]]
        units[key] = GeometricUnit(
            unit_key=key,
            offset_v=(uniq[g] + 0.5) * unit_size,
            point_indices=np.sort(members),
            centroid=centroids[g],
            scatter=scatter[g],
            point_count=int(counts[g]),
        )
    return UnitGrid(units, unit_size, level=1)


def coarsen(grid: UnitGrid) -> UnitGrid:
    """Merge 2x2x2 blocks of child units into parent units one level up.

    Statistics are pooled exactly: counts added, centroids combined by
    weighted mean, scatters merged through the parallel-axis rule on the
    (n-1)-normalized second moments.
    """
    if grid.level >= MAX_LEVEL:
        raise MaxLevelError(f"cannot coarsen past level {MAX_LEVEL}")
    parent_size = grid.unit_size * 2.0
    buckets: dict[tuple[int, int, int], list[GeometricUnit]] = {}
    for key, unit in grid.units.items():
        pkey = tuple(int(np.floor(k / 2)) for k in key)
        buckets.setdefault(pkey, []).append(unit)
    parents: dict[tuple[int, int, int], GeometricUnit] = {}
    for pkey in sorted(buckets):
        children = buckets[pkey]
        n = sum(u.point_count for u in children)
        centroid = sum(u.point_count * u.centroid for u in children) / n
        moment = np.zeros((3, 3))
        for u in children:
            d = u.centroid - centroid
            moment += u.scatter * max(u.point_count - 1, 0)
            moment += u.point_count * np.outer(d, d)
        scatter = moment / max(n - 1, 1)
        if n < 2:
            scatter = np.zeros((3, 3))
        indices = np.sort(np.concatenate([u.point_indices for u in children]))
        parents[pkey] = GeometricUnit(
            unit_key=pkey,
            offset_v=(np.array(pkey, dtype=np.float64) + 0.5) * parent_size,
            point_indices=indices,
            centroid=centroid,
            scatter=0.5 * (scatter + scatter.T),
            point_count=n,
        )
    return UnitGrid(parents, parent_size, level=grid.level + 1)
