"""Voxelized Gaussian map kept as a hash grid of per-voxel moment accumulators.

Each stored voxel carries sufficient statistics (point count ``n``, point sum
``s``, outer-product sum ``q``) from which the mean and covariance are derived
on demand. Accumulators make the per-point update O(1) and keep incremental
and batch construction consistent to floating-point reassociation error.

Candidate frames are staged as a copy-on-write overlay (`StagedUpdate`) so the
base map stays untouched until the caller decides to commit. Single writer per
map; reads of base statistics during an open stage are fine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VoxelKey = tuple[int, int, int]

Estimator = str  # 'sample' | 'population'
_ESTIMATORS = ("sample", "population")


class InsufficientPointsError(ValueError):
    """Sample covariance requested for a voxel with fewer than two points."""


class StaleStageError(RuntimeError):
    """Commit of a stage whose base map has changed since staging."""


def voxel_index(p, voxel_size: float) -> VoxelKey:
    """Grid cell of a point: floor(coordinate / size) per axis.

    Floor, not truncation, so negative coordinates land in the cell below
    zero and each point belongs to exactly one half-open cube.
    """
    if voxel_size <= 0.0:
        raise ValueError("voxel_size must be positive")
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point")
    i, j, k = np.floor(p / voxel_size).astype(np.int64)
    return int(i), int(j), int(k)


@dataclass
class VoxelStats:
    """Sufficient statistics of the points in one voxel."""

    n: int = 0
    s: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @staticmethod
    def from_points(pts: np.ndarray) -> "VoxelStats":
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        return VoxelStats(len(pts), pts.sum(axis=0), pts.T @ pts)

    def add_point(self, p: np.ndarray) -> None:
        self.n += 1
        self.s = self.s + p
        self.q = self.q + np.outer(p, p)

    def merged(self, other: "VoxelStats") -> "VoxelStats":
        return VoxelStats(self.n + other.n, self.s + other.s, self.q + other.q)

    def copy(self) -> "VoxelStats":
        return VoxelStats(self.n, self.s.copy(), self.q.copy())

    def mean(self) -> np.ndarray:
        if self.n < 1:
            raise InsufficientPointsError("empty voxel has no mean")
        return self.s / self.n

    def covariance(self, estimator: Estimator = "sample") -> np.ndarray:
        """Covariance about the mean; symmetrized before return.

        'sample' divides by n-1 and needs n >= 2; 'population' divides by n.
        """
        if estimator not in _ESTIMATORS:
            raise ValueError(f"unknown estimator {estimator!r}")
        if self.n < 1:
            raise InsufficientPointsError("empty voxel has no covariance")
        mu = self.s / self.n
        centered = self.q - self.n * np.outer(mu, mu)
        if estimator == "sample":
            if self.n < 2:
                raise InsufficientPointsError("sample covariance needs at least 2 points")
            cov = centered / (self.n - 1)
        else:
            cov = centered / self.n
        return 0.5 * (cov + cov.T)

    def gaussian(self, estimator: Estimator = "sample") -> tuple[np.ndarray, np.ndarray]:
        return self.mean(), self.covariance(estimator)


def _accumulate_by_voxel(points, voxel_size: float):
    """Group points by voxel and reduce to (keys, counts, sums, outer sums).

    Non-finite rows are dropped and counted. Returns (keys (M,3) int array,
    counts (M,), sums (M,3), qsums (M,3,3), rejected).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    finite = np.isfinite(pts).all(axis=1)
    rejected = int(len(pts) - int(finite.sum()))
    if rejected:
        pts = pts[finite]
    if len(pts) == 0:
        return (
            np.empty((0, 3), dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty((0, 3)),
            np.empty((0, 3, 3)),
            rejected,
        )
    keys = np.floor(pts / voxel_size).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = pts[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.flatnonzero(first)
    counts = np.diff(np.append(starts, len(keys)))
    sums = np.add.reduceat(pts, starts, axis=0)
    outers = (pts[:, :, None] * pts[:, None, :]).reshape(len(pts), 9)
    qsums = np.add.reduceat(outers, starts, axis=0).reshape(-1, 3, 3)
    return keys[starts], counts, sums, qsums, rejected


def group_points_by_voxel(points, voxel_size: float):
    """Partition finite points into per-voxel arrays.

    Returns (groups, rejected) where groups is a list of (key, points)
    pairs in sorted key order. Shares the grid convention with GmmMap.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    finite = np.isfinite(pts).all(axis=1)
    rejected = int(len(pts) - int(finite.sum()))
    if rejected:
        pts = pts[finite]
    if len(pts) == 0:
        return [], rejected
    if not (np.isfinite(voxel_size) and voxel_size > 0):
        raise ValueError("voxel size must be positive and finite")
    keys = np.floor(pts / voxel_size).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = pts[order]
    first = np.ones(len(keys), dtype=bool)
    first[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.flatnonzero(first)
    ends = np.append(starts[1:], len(keys))
    groups = [
        (tuple(int(v) for v in keys[a]), pts[a:b]) for a, b in zip(starts, ends)
    ]
    return groups, rejected


@dataclass
class StagedUpdate:
    """Copy-on-write overlay of one candidate frame over a base map."""

    base: "GmmMap"
    base_version: int
    overlay: dict[VoxelKey, VoxelStats]
    new_voxel_keys: set[VoxelKey]
    point_count: int
    rejected: int


class GmmMap:
    """Hash grid from integer voxel key to per-voxel statistics."""

    def __init__(self, voxel_size: float = 4.0):
        if voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self._table: dict[VoxelKey, VoxelStats] = {}
        self.version = 0
        self.total_points = 0
        self.rejected_points = 0

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, key: VoxelKey) -> bool:
        return key in self._table

    def keys(self):
        return self._table.keys()

    def items(self):
        return self._table.items()

    def get(self, key: VoxelKey) -> VoxelStats | None:
        return self._table.get(key)

    def insert_point(self, p) -> bool:
        """Add one point; returns False (and counts it) if non-finite."""
        p = np.asarray(p, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            self.rejected_points += 1
            return False
        key = voxel_index(p, self.voxel_size)
        stats = self._table.get(key)
        if stats is None:
            stats = VoxelStats()
            self._table[key] = stats
        stats.add_point(p)
        self.total_points += 1
        self.version += 1
        return True

    def insert_points(self, points) -> int:
        """Vectorized bulk insert; returns the number of accepted points."""
        keys, counts, sums, qsums, rejected = _accumulate_by_voxel(points, self.voxel_size)
        for idx in range(len(keys)):
            key = (int(keys[idx, 0]), int(keys[idx, 1]), int(keys[idx, 2]))
            delta = VoxelStats(int(counts[idx]), sums[idx], qsums[idx])
            stats = self._table.get(key)
            self._table[key] = delta if stats is None else stats.merged(delta)
        accepted = int(counts.sum()) if len(counts) else 0
        self.total_points += accepted
        self.rejected_points += rejected
        self.version += 1
        return accepted

    def stage_frame(self, points) -> StagedUpdate:
        """Overlay with post-insertion stats for every voxel the frame touches.

        Points must already be in the map frame. The base map is not modified.
        """
        keys, counts, sums, qsums, rejected = _accumulate_by_voxel(points, self.voxel_size)
        overlay: dict[VoxelKey, VoxelStats] = {}
        new_keys: set[VoxelKey] = set()
        for idx in range(len(keys)):
            key = (int(keys[idx, 0]), int(keys[idx, 1]), int(keys[idx, 2]))
            delta = VoxelStats(int(counts[idx]), sums[idx], qsums[idx])
            base_stats = self._table.get(key)
            if base_stats is None:
                overlay[key] = delta
                new_keys.add(key)
            else:
                overlay[key] = base_stats.merged(delta)
        accepted = int(counts.sum()) if len(counts) else 0
        return StagedUpdate(self, self.version, overlay, new_keys, accepted, rejected)

    def commit(self, stage: StagedUpdate) -> None:
        """Adopt a stage's overlay. Rejects stages from another map state."""
        if stage.base is not self or stage.base_version != self.version:
            raise StaleStageError("stage was built against a different map state")
        self._table.update(stage.overlay)
        self.total_points += stage.point_count
        self.rejected_points += stage.rejected
        self.version += 1

    def prune_outside(self, center, radius: float) -> int:
        """Drop voxels whose cell center is farther than radius from center."""
        if radius <= 0.0:
            raise ValueError("radius must be positive")
        if not self._table:
            return 0
        center = np.asarray(center, dtype=float).reshape(3)
        keys = np.array(list(self._table.keys()), dtype=float)
        centers = (keys + 0.5) * self.voxel_size
        outside = np.linalg.norm(centers - center, axis=1) > radius
        removed = 0
        for idx in np.flatnonzero(outside):
            key = (int(keys[idx, 0]), int(keys[idx, 1]), int(keys[idx, 2]))
            self.total_points -= self._table.pop(key).n
            removed += 1
        if removed:
            self.version += 1
        return removed


def build_map(points, voxel_size: float = 4.0) -> GmmMap:
    """One-shot map over a point list; equivalent to repeated insertion."""
    grid = GmmMap(voxel_size)
    grid.insert_points(points)
    return grid


def blended_gaussian_update(
    n_old: int, mu_old: np.ndarray, sigma_old: np.ndarray, new_points: np.ndarray
) -> tuple[int, np.ndarray, np.ndarray]:
    """Approximate incremental update that stores (n, mean, covariance) directly.

    Blends the previous covariance, which was centered at the previous mean,
    with the new points' scatter about the updated mean, dividing by the
    combined count. Not equal to recomputing from all points; retained as a
    benchmark strategy so the divergence from the exact accumulator path can
    be measured.
    """
    new_points = np.asarray(new_points, dtype=float).reshape(-1, 3)
    m = len(new_points)
    if m == 0:
        return n_old, mu_old, sigma_old
    total = n_old + m
    mu_new = (n_old * mu_old + new_points.sum(axis=0)) / total
    centered = new_points - mu_new
    sigma_new = (n_old * sigma_old + centered.T @ centered) / total
    return total, mu_new, sigma_new
