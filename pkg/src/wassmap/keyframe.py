"""Streaming keyframe selection: stage, score, decide, commit, prune.

Each incoming frame is transformed into the map frame, staged onto the
current voxel map, and scored with the map-level Wasserstein dissimilarity.
The frame becomes a keyframe when the score exceeds the threshold. What
happens to the staged update is a policy choice: by default only keyframes
are committed, so redundant frames leave the map untouched; the alternative
commits every frame unconditionally. After every processed frame, voxels
beyond the pruning radius of the current pose are dropped.

The first frame always bootstraps the map and is a keyframe by definition;
its score is reported as +inf. Frames that share no usable voxel with the
map (no overlap, or all shared voxels under the point floor) are decided by
``no_comparable_policy`` and flagged, with the score recorded as NaN.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from wassmap.geometry import Pose
from wassmap.voxel_map import GmmMap
from wassmap.wasserstein import (
    AGGREGATION_POLICIES,
    NoComparableVoxelsError,
    map_dissimilarity,
)

logger = logging.getLogger(__name__)

COMMIT_POLICIES = ("keyframes-only", "always")
NO_COMPARABLE_POLICIES = ("keyframe", "non-keyframe")
DECISION_FLAGS = ("bootstrap", "scored", "no_comparable")


class EmptyFrameError(ValueError):
    """Frame contains no points."""


@dataclass(frozen=True)
class SelectorConfig:
    tau: float
    voxel_size: float = 4.0
    radius: float = 100.0
    estimator: str = "sample"
    min_points: int = 5
    aggregation: str = "affected"
    commit_policy: str = "keyframes-only"
    no_comparable_policy: str = "keyframe"

    def __post_init__(self):
        if not (math.isfinite(self.tau) or self.tau == math.inf) or self.tau < 0.0:
            raise ValueError("tau must be >= 0")
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be positive")
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        if self.estimator not in ("sample", "population"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.min_points < 1:
            raise ValueError("min_points must be >= 1")
        if self.estimator == "sample" and self.min_points < 2:
            raise ValueError("sample covariance needs min_points >= 2")
        if self.aggregation not in AGGREGATION_POLICIES:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.commit_policy not in COMMIT_POLICIES:
            raise ValueError(f"unknown commit_policy {self.commit_policy!r}")
        if self.no_comparable_policy not in NO_COMPARABLE_POLICIES:
            raise ValueError(f"unknown no_comparable_policy {self.no_comparable_policy!r}")


@dataclass(frozen=True)
class FrameDecision:
    frame_index: int          # 1-based position in the input sequence
    pose: Pose
    dw: float                 # +inf for bootstrap, NaN when nothing compared
    keyframe: bool
    flag: str                 # one of DECISION_FLAGS
    affected_count: int = 0
    new_count: int = 0
    skipped_count: int = 0
    millis: float = 0.0
    timestamp: float | None = None


def replay_decisions(decisions, tau: float) -> list[FrameDecision]:
    """Re-threshold recorded scores without touching any map state.

    Bootstrap frames stay keyframes and no-comparable frames keep their
    recorded policy decision; only scored frames are re-decided. Note that a
    live rerun at the new threshold can differ when commits depend on the
    decisions; replay answers "what would thresholding alone have chosen".
    """
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    out = []
    for d in decisions:
        if d.flag == "scored":
            out.append(replace(d, keyframe=bool(d.dw > tau)))
        else:
            out.append(d)
    return out


def keyframe_indices(decisions) -> list[int]:
    return [d.frame_index for d in decisions if d.keyframe]


class KeyframeSelector:
    """Holds the evolving map and the ordered decision log."""

    def __init__(self, config: SelectorConfig):
        self.config = config
        self.map: GmmMap | None = None
        self.decisions: list[FrameDecision] = []
        self._frames_seen = 0

    @property
    def bootstrapped(self) -> bool:
        return self.map is not None

    def _checked_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise EmptyFrameError("frame contains no points")
        return pts

    def bootstrap(self, points, pose: Pose, timestamp: float | None = None) -> FrameDecision:
        """Build the initial map from the first frame; always a keyframe."""
        if self.bootstrapped:
            raise RuntimeError("selector already bootstrapped")
        start = time.perf_counter()
        self._frames_seen += 1
        pts = self._checked_points(points)
        if not np.all(np.isfinite(pose.translation)):
            raise ValueError("non-finite pose")
        grid = GmmMap(self.config.voxel_size)
        grid.insert_points(pose.transform_points(pts))
        if grid.total_points == 0:
            raise EmptyFrameError("frame contains no finite points")
        self.map = grid
        decision = FrameDecision(
            frame_index=self._frames_seen,
            pose=pose,
            dw=math.inf,
            keyframe=True,
            flag="bootstrap",
            new_count=len(grid),
            millis=(time.perf_counter() - start) * 1e3,
            timestamp=timestamp,
        )
        self.decisions.append(decision)
        return decision

    def process_frame(self, points, pose: Pose, timestamp: float | None = None) -> FrameDecision:
        """Score one frame against the map and apply the configured policies."""
        if not self.bootstrapped:
            raise RuntimeError("selector not bootstrapped")
        start = time.perf_counter()
        self._frames_seen += 1
        pts = self._checked_points(points)
        if not np.all(np.isfinite(pose.translation)):
            raise ValueError("non-finite pose")
        cfg = self.config

        stage = self.map.stage_frame(pose.transform_points(pts))
        try:
            report = map_dissimilarity(
                self.map,
                stage,
                policy=cfg.aggregation,
                estimator=cfg.estimator,
                min_points=cfg.min_points,
            )
            dw = report.value
            keyframe = dw > cfg.tau
            flag = "scored"
        except NoComparableVoxelsError as err:
            report = err.report
            dw = math.nan
            keyframe = cfg.no_comparable_policy == "keyframe"
            flag = "no_comparable"

        if cfg.commit_policy == "always" or keyframe:
            self.map.commit(stage)
        self.map.prune_outside(pose.translation, cfg.radius)

        decision = FrameDecision(
            frame_index=self._frames_seen,
            pose=pose,
            dw=dw,
            keyframe=keyframe,
            flag=flag,
            affected_count=report.affected_count,
            new_count=report.new_count,
            skipped_count=report.skipped_count,
            millis=(time.perf_counter() - start) * 1e3,
            timestamp=timestamp,
        )
        self.decisions.append(decision)
        return decision

    def run_sequence(self, frames) -> list[FrameDecision]:
        """Process an ordered sequence of (points, pose[, timestamp]) frames.

        Per-frame errors skip that frame with a warning instead of aborting;
        frame indices still count every offered frame.
        """
        out = []
        for entry in frames:
            points, pose, *rest = entry
            timestamp = rest[0] if rest else None
            step = self.process_frame if self.bootstrapped else self.bootstrap
            try:
                out.append(step(points, pose, timestamp))
            except (EmptyFrameError, ValueError) as err:
                logger.warning("frame %d skipped: %s", self._frames_seen, err)
        return out
