"""Point clouds, super-segment partitions, and granularity control.

A shape is a 2048-point cloud normalized to the unit bounding cube. Its
super-segments are a hard partition of the points, produced either from
exported convex half-space sets or from per-segment representative point
sets (nearest-representative fallback).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .errors import DegenerateGeometryError, InvalidInputError

MODEL_POINT_COUNT = 2048
SEGMENT_POINT_CAP = 512


@dataclass(frozen=True)
class PointCloud:
    """N x 3 coordinates, unit-cube normalized upstream."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"expected N x 3 points, got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise InvalidInputError("empty point cloud")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class SuperSegmentSet:
    """A partition of a cloud's points into S super-segments.

    ``per_segment_points[s]`` lists the point indices of segment ``s``,
    truncated to at most :data:`SEGMENT_POINT_CAP` points by uniform
    subsampling; ``assignment`` is the untruncated point -> segment map.
    """

    shape_id: str
    assignment: np.ndarray
    per_segment_points: list[np.ndarray] = field(default_factory=list)

    @property
    def num_segments(self) -> int:
        return len(self.per_segment_points)

    @classmethod
    def from_assignment(
        cls,
        shape_id: str,
        assignment: np.ndarray,
        cap: int = SEGMENT_POINT_CAP,
        rng_seed: int = 0,
    ) -> "SuperSegmentSet":
        assignment = np.asarray(assignment, dtype=np.int64)
        if assignment.ndim != 1 or assignment.size == 0:
            raise InvalidInputError("assignment must be a non-empty 1-D array")
        # Compact segment ids so every index in [0, S) owns >= 1 point.
        uniq, compact = np.unique(assignment, return_inverse=True)
        per_segment = []
        for s in range(uniq.size):
            idx = np.nonzero(compact == s)[0]
            per_segment.append(subsample_segment(idx, cap=cap, rng_seed=rng_seed + s))
        return cls(shape_id=shape_id, assignment=compact, per_segment_points=per_segment)

    def validate(self) -> None:
        s = self.num_segments
        if s == 0:
            raise DegenerateGeometryError("segment set has no segments")
        if self.assignment.min() < 0 or self.assignment.max() >= s:
            raise InvalidInputError("assignment indices out of range")
        counts = np.bincount(self.assignment, minlength=s)
        if np.any(counts == 0):
            raise InvalidInputError("every segment index must own at least one point")
        for idx in self.per_segment_points:
            if idx.size == 0 or idx.size > SEGMENT_POINT_CAP:
                raise InvalidInputError("per-segment point list size out of bounds")


@dataclass
class PartLabels:
    """Ground-truth per-point part ids with their name table."""

    labels: np.ndarray
    part_names: list[str]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= len(self.part_names)
        ):
            raise InvalidInputError("part label outside the part-name table")


@dataclass
class ShapeRecord:
    id: str
    category: str
    cloud: PointCloud
    segments: SuperSegmentSet
    gt: Optional[PartLabels] = None

    def __post_init__(self):
        if self.segments.assignment.shape[0] != len(self.cloud):
            raise InvalidInputError("segment assignment length != point count")


def subsample_segment(points: np.ndarray, cap: int = SEGMENT_POINT_CAP, rng_seed: int = 0) -> np.ndarray:
    """Uniform random subset of ``points`` of size ``cap`` (identity when below cap)."""
    points = np.asarray(points, dtype=np.int64)
    if cap < 1:
        raise InvalidInputError("cap must be >= 1")
    if points.size == 0:
        raise InvalidInputError("cannot subsample an empty point list")
    if points.size <= cap:
        return points
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(points.size, size=cap, replace=False)
    return points[np.sort(chosen)]


def _convex_signed_distance(points: np.ndarray, planes: np.ndarray) -> np.ndarray:
    """Signed distance of each point to a convex given as half-space planes.

    Planes are rows (a, b, c, d) meaning a*x + b*y + c*z + d <= 0 inside.
    The convex SDF is the max over plane signed distances (negative inside).
    """
    planes = np.asarray(planes, dtype=np.float64)
    normals = planes[:, :3]
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise InvalidInputError("half-space with zero normal")
    d = (points @ normals.T + planes[:, 3]) / norms
    return d.max(axis=1)


def _nearest_point_distance(points: np.ndarray, reps: np.ndarray) -> np.ndarray:
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[1] != 3 or reps.shape[0] == 0:
        raise InvalidInputError("representative point set must be non-empty M x 3")
    d2 = ((points[:, None, :] - reps[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def assign_points_to_segments(
    cloud: PointCloud,
    segment_geometry: Sequence[np.ndarray],
    shape_id: str = "",
    cap: int = SEGMENT_POINT_CAP,
    rng_seed: int = 0,
) -> SuperSegmentSet:
    """Partition a cloud by minimum distance to each segment's geometry.

    Each element of ``segment_geometry`` is either an M x 4 array of
    half-space planes (convex mode, signed distance = max plane distance)
    or an M x 3 array of representative surface points (fallback mode,
    plain nearest-point Euclidean distance). Ties go to the lowest segment
    index; segments that win no point are dropped and indices compacted.
    """
    if len(segment_geometry) == 0:
        raise InvalidInputError("segment_geometry is empty")
    pts = cloud.points.astype(np.float64)
    dists = np.empty((len(pts), len(segment_geometry)), dtype=np.float64)
    for j, geom in enumerate(segment_geometry):
        geom = np.asarray(geom, dtype=np.float64)
        if geom.ndim != 2 or geom.shape[1] not in (3, 4):
            raise InvalidInputError(f"segment {j}: geometry must be M x 3 or M x 4")
        if geom.shape[1] == 4:
            dists[:, j] = _convex_signed_distance(pts, geom)
        else:
            dists[:, j] = _nearest_point_distance(pts, geom)
    assignment = np.argmin(dists, axis=1)  # argmin breaks ties toward low index
    if np.unique(assignment).size == 0:
        raise DegenerateGeometryError("no segment received any point")
    return SuperSegmentSet.from_assignment(shape_id, assignment, cap=cap, rng_seed=rng_seed)


def split_by_granularity(
    segments: SuperSegmentSet,
    cloud: PointCloud,
    points_per_cluster: int,
    rng_seed: int = 0,
) -> SuperSegmentSet:
    """Split every segment into K-means pieces of ~``points_per_cluster`` points.

    Each segment with point set P is replaced by max(1, round(|P| / N))
    K-means clusters over its own points, so points from different input
    segments are never merged. N = 1 degenerates to one-point segments.
    """
    if points_per_cluster < 1:
        raise InvalidInputError("points_per_cluster must be >= 1")
    n = cloud.points.shape[0]
    new_assignment = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for s in range(segments.num_segments):
        idx = np.nonzero(segments.assignment == s)[0]
        k = max(1, int(np.floor(idx.size / points_per_cluster + 0.5)))
        if k <= 1:
            new_assignment[idx] = next_id
            next_id += 1
            continue
        if k >= idx.size:
            # Extreme granularity: every point its own segment.
            new_assignment[idx] = next_id + np.arange(idx.size)
            next_id += idx.size
            continue
        km = KMeans(
            n_clusters=k,
            n_init=1,
            max_iter=50,
            tol=1e-6,
            random_state=rng_seed + s,
        )
        labels = km.fit_predict(cloud.points[idx].astype(np.float64))
        new_assignment[idx] = next_id + labels
        next_id += labels.max() + 1
    return SuperSegmentSet.from_assignment(
        segments.shape_id, new_assignment, rng_seed=rng_seed
    )
