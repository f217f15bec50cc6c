"""Point-cloud value types and the preprocessing chain.

Filtering, fixed-range normalization, voxel quantization and
distance-based trajectory subsampling.  Every function here is pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class EmptyCloudError(ValueError):
    """Raised when an operation produces or receives a cloud with no points."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None
    frame_id: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"intensity length {inten.shape[0]} != point count {pts.shape[0]}"
                )
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.frame_id != other.frame_id:
            return False
        if (self.intensity is None) != (other.intensity is None):
            return False
        if not np.array_equal(self.points, other.points):
            return False
        return self.intensity is None or np.array_equal(self.intensity, other.intensity)

    def select(self, mask_or_index) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[mask_or_index]
        return PointCloud(self.points[mask_or_index], inten, self.frame_id)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.intensity, self.frame_id)


@dataclass(frozen=True)
class NormalizationParams:
    scale_factor: float = 60.0
    max_range: float = 60.0
    drop_zero_points: bool = True

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise ValueError("scale_factor must be > 0")
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")


@dataclass(frozen=True)
class ScanRecord:
    cloud: PointCloud
    pose: tuple
    timestamp: float = 0.0
    sequence_id: str = ""
    heading: Optional[float] = None
    scan_index: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pose = tuple(float(v) for v in self.pose)
        if len(pose) == 2:
            pose = pose + (0.0,)
        if len(pose) != 3 or not all(np.isfinite(pose)):
            raise ValueError(f"pose must be 2 or 3 finite coordinates, got {self.pose}")
        object.__setattr__(self, "pose", pose)

    @property
    def key(self) -> tuple:
        return (self.sequence_id, self.scan_index)

    @property
    def ground_xy(self) -> np.ndarray:
        return np.array(self.pose[:2])


def filter_cloud(cloud: PointCloud, params: NormalizationParams = NormalizationParams()) -> PointCloud:
    """Drop points beyond ``max_range`` and (optionally) exact-zero points.

    Raises EmptyCloudError if nothing survives.
    """
    pts = cloud.points
    keep = np.linalg.norm(pts, axis=1) <= params.max_range
    if params.drop_zero_points:
        keep &= np.any(pts != 0.0, axis=1)
    out = cloud.select(keep)
    if len(out) == 0:
        raise EmptyCloudError("no points left after range/zero filtering")
    return out


def centroid(points: np.ndarray) -> np.ndarray:
    return points.mean(axis=0)


def normalize_cloud(cloud: PointCloud, params: NormalizationParams = NormalizationParams()) -> PointCloud:
    """Map each point p to (p - mu) / S, with mu the cloud centroid."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot normalize an empty cloud")
    mu = centroid(cloud.points)
    return cloud.with_points((cloud.points - mu) / params.scale_factor)


def voxel_indices(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(points / voxel_size).astype(np.int64)


def quantize_cloud(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Keep the first point (in input order) falling in each voxel cell."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be > 0")
    if len(cloud) == 0:
        return cloud
    cells = voxel_indices(cloud.points, voxel_size)
    # np.unique returns the first occurrence index for each distinct row
    _, first = np.unique(cells, axis=0, return_index=True)
    return cloud.select(np.sort(first))


def subsample_trajectory(records: Sequence[ScanRecord], min_distance: float) -> list[ScanRecord]:
    """Greedy distance sampling on the ground plane.

    The first record is always kept; a later record is kept when it is at
    least ``min_distance`` away (in x, y) from the last kept one.
    """
    if not min_distance > 0:
        raise ValueError("min_distance must be > 0")
    kept: list[ScanRecord] = []
    last = None
    for rec in records:
        xy = rec.ground_xy
        if last is None or np.hypot(*(xy - last)) >= min_distance:
            kept.append(rec)
            last = xy
    return kept


def preprocess(
    cloud: PointCloud,
    params: NormalizationParams = NormalizationParams(),
    voxel_size: Optional[float] = 0.01,
) -> PointCloud:
    """Input chain for the learned head: filter, normalize, then quantize.

    Quantization runs on normalized coordinates, so the default cell of 0.01
    corresponds to ``0.01 * scale_factor`` metres.
    """
    out = normalize_cloud(filter_cloud(cloud, params), params)
    if voxel_size is not None:
        out = quantize_cloud(out, voxel_size)
    return out
