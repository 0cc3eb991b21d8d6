"""2-Wasserstein distance between Gaussians and its map-level aggregation.

For Gaussians the distance has the closed form

    W2^2 = |mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1^{1/2} S2 S1^{1/2})^{1/2})

computed here with symmetric eigendecompositions of 3x3 matrices. Voxels with
coplanar or collinear points give rank-deficient covariances, so eigenvalues
in [-1e-9, 0) are clamped to zero; anything more negative is rejected as an
invalid covariance. When the two covariances are bitwise equal the trace term
vanishes identically and the distance is returned as the plain mean offset,
which keeps d(g, g) exactly zero instead of sqrt(rounding noise).

Map-level dissimilarity compares a staged frame against its base map voxel by
voxel and averages under a selectable policy. Keys are sorted before the
reduction so the result is bit-stable regardless of hash order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from wassmap.voxel_map import GmmMap, StagedUpdate, VoxelKey

AGGREGATION_POLICIES = ("affected", "all", "mass")

_EIG_CLAMP = 1e-9
_SYM_TOL = 1e-9


class InvalidCovarianceError(ValueError):
    """Covariance is non-symmetric, non-finite, or indefinite beyond tolerance."""


class NoComparableVoxelsError(ValueError):
    """The staged frame shares no voxel with enough points on both sides.

    Carries the partial report so callers can still see new/skipped counts.
    """

    def __init__(self, message: str, report: "DissimilarityReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class GaussianComponent:
    """One voxel's Gaussian: mean, covariance, and the point count behind it."""

    mu: np.ndarray
    sigma: np.ndarray
    mass: int = 0


@dataclass
class DissimilarityReport:
    value: float
    distances: dict[VoxelKey, float] = field(default_factory=dict)
    affected_count: int = 0  # voxels that entered the average
    new_count: int = 0       # frame voxels absent from the base map
    skipped_count: int = 0   # shared voxels under the point-count floor


def _validate_covariances(sig: np.ndarray, eig_floor_checked: bool) -> None:
    if not np.all(np.isfinite(sig)):
        raise InvalidCovarianceError("non-finite covariance")
    asym = np.abs(sig - np.swapaxes(sig, -1, -2)).max()
    if asym > _SYM_TOL:
        raise InvalidCovarianceError(f"covariance asymmetric by {asym:.3g}")
    if not eig_floor_checked:
        lam_min = np.linalg.eigvalsh(sig).min()
        if lam_min < -_EIG_CLAMP:
            raise InvalidCovarianceError(f"covariance has eigenvalue {lam_min:.3g}")


def sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition."""
    mat = np.asarray(mat, dtype=float)
    _validate_covariances(mat, eig_floor_checked=True)
    lam, vec = np.linalg.eigh(0.5 * (mat + np.swapaxes(mat, -1, -2)))
    if lam.min() < -_EIG_CLAMP:
        raise InvalidCovarianceError(f"matrix has eigenvalue {lam.min():.3g}")
    lam = np.clip(lam, 0.0, None)
    root = np.einsum("...ij,...j,...kj->...ik", vec, np.sqrt(lam), vec)
    return 0.5 * (root + np.swapaxes(root, -1, -2))


def w2_batch(mu1, sig1, mu2, sig2) -> np.ndarray:
    """Pairwise Wasserstein distances for aligned batches of Gaussians.

    Shapes (B,3) and (B,3,3); returns (B,). Inputs are validated once per
    batch, which keeps the per-pair cost to two batched eigendecompositions.
    """
    mu1 = np.asarray(mu1, dtype=float).reshape(-1, 3)
    mu2 = np.asarray(mu2, dtype=float).reshape(-1, 3)
    sig1 = np.asarray(sig1, dtype=float).reshape(-1, 3, 3)
    sig2 = np.asarray(sig2, dtype=float).reshape(-1, 3, 3)
    if not (len(mu1) == len(mu2) == len(sig1) == len(sig2)):
        raise ValueError("batch sizes disagree")
    if len(mu1) == 0:
        return np.empty(0)
    if not (np.all(np.isfinite(mu1)) and np.all(np.isfinite(mu2))):
        raise ValueError("non-finite mean")
    _validate_covariances(sig1, eig_floor_checked=True)
    _validate_covariances(sig2, eig_floor_checked=False)

    dmu = mu1 - mu2
    mean_sq = (dmu * dmu).sum(axis=-1)
    same_sigma = np.all(sig1 == sig2, axis=(-2, -1))
    if same_sigma.all():
        # the trace term vanishes identically, skip the matrix roots
        return np.sqrt(mean_sq)

    lam1, vec1 = np.linalg.eigh(0.5 * (sig1 + np.swapaxes(sig1, -1, -2)))
    if lam1.min() < -_EIG_CLAMP:
        raise InvalidCovarianceError(f"covariance has eigenvalue {lam1.min():.3g}")
    lam1 = np.clip(lam1, 0.0, None)
    s1h = np.einsum("...ij,...j,...kj->...ik", vec1, np.sqrt(lam1), vec1)
    inner = s1h @ sig2 @ s1h
    inner = 0.5 * (inner + np.swapaxes(inner, -1, -2))
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)).sum(axis=-1)

    traces = np.trace(sig1, axis1=-2, axis2=-1) + np.trace(sig2, axis1=-2, axis2=-1)
    total = mean_sq + traces - 2.0 * cross
    floor = -(_EIG_CLAMP + 1e-12 * np.maximum(traces, 1.0))
    if np.any(total < floor):
        raise InvalidCovarianceError("Wasserstein inner value strongly negative")
    out = np.sqrt(np.clip(total, 0.0, None))
    if same_sigma.any():
        out[same_sigma] = np.sqrt(mean_sq[same_sigma])
    return out


def w2(g1: GaussianComponent, g2: GaussianComponent) -> float:
    """Wasserstein distance between two Gaussian components, in meters."""
    return float(
        w2_batch(
            g1.mu[None, :], g1.sigma[None, :, :], g2.mu[None, :], g2.sigma[None, :, :]
        )[0]
    )


def _batch_moments(stats_list, estimator: str):
    """Means and covariances for a list of voxel statistics, batched."""
    n = np.array([st.n for st in stats_list], dtype=float)
    s = np.array([st.s for st in stats_list])
    q = np.array([st.q for st in stats_list])
    mu = s / n[:, None]
    centered = q - n[:, None, None] * (mu[:, :, None] * mu[:, None, :])
    denom = (n - 1.0) if estimator == "sample" else n
    cov = centered / denom[:, None, None]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return mu, cov


def map_dissimilarity(
    base: GmmMap,
    stage: StagedUpdate,
    policy: str = "affected",
    estimator: str = "sample",
    min_points: int = 2,
) -> DissimilarityReport:
    """Average per-voxel Wasserstein distance between a base map and a stage.

    Every voxel the stage touches falls into one of three bins: compared
    (present in the base with at least ``min_points`` points on both sides),
    new (absent from the base, excluded from the average), or skipped (shared
    but under the point floor). Aggregation policies:

      affected  mean over compared voxels (default)
      all       sum over compared voxels divided by the base map's voxel count
      mass      mean weighted by each compared voxel's base-side point count

    Raises `NoComparableVoxelsError` (report attached) when nothing compares.
    """
    if policy not in AGGREGATION_POLICIES:
        raise ValueError(f"unknown aggregation policy {policy!r}")
    if estimator not in ("sample", "population"):
        raise ValueError(f"unknown estimator {estimator!r}")
    if stage.base is not base:
        raise ValueError("stage does not belong to this map")
    floor = max(int(min_points), 2 if estimator == "sample" else 1)

    compared: list[VoxelKey] = []
    skipped = 0
    for key in stage.overlay:
        if key in stage.new_voxel_keys:
            continue
        if base.get(key).n >= floor and stage.overlay[key].n >= floor:
            compared.append(key)
        else:
            skipped += 1
    compared.sort()
    new_count = len(stage.new_voxel_keys)

    if not compared:
        report = DissimilarityReport(
            value=math.nan,
            distances={},
            affected_count=0,
            new_count=new_count,
            skipped_count=skipped,
        )
        raise NoComparableVoxelsError("no comparable voxels", report)

    mu_base, cov_base = _batch_moments([base.get(k) for k in compared], estimator)
    mu_over, cov_over = _batch_moments([stage.overlay[k] for k in compared], estimator)
    dists = w2_batch(mu_base, cov_base, mu_over, cov_over)

    if policy == "affected":
        value = float(dists.mean())
    elif policy == "all":
        value = float(dists.sum() / len(base))
    else:
        weights = np.array([base.get(k).n for k in compared], dtype=float)
        value = float((dists * weights).sum() / weights.sum())

    return DissimilarityReport(
        value=value,
        distances={k: float(d) for k, d in zip(compared, dists)},
        affected_count=len(compared),
        new_count=new_count,
        skipped_count=skipped,
    )
