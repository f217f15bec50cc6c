"""Train/test split protocols: zones, one-in-one-out, and whole runs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cloud import ScanRecord


class DegenerateSplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    protocol: str
    train_ids: tuple
    test_ids: tuple
    zone_centers: tuple = field(default=())
    zone_radius: float | None = None

    def __post_init__(self):
        if self.protocol not in ("zone", "interleaved", "run_based"):
            raise ValueError(f"unknown split protocol {self.protocol!r}")
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError("train and test sets overlap")

    def select(self, records: Sequence[ScanRecord]) -> tuple[list[ScanRecord], list[ScanRecord]]:
        by_key = {r.key: r for r in records}
        return [by_key[k] for k in self.train_ids], [by_key[k] for k in self.test_ids]


def _check_keys(records: Sequence[ScanRecord]) -> None:
    keys = [r.key for r in records]
    if len(set(keys)) != len(keys):
        raise ValueError("records must have unique (sequence_id, scan_index) keys")


def make_zone_split(records: Sequence[ScanRecord], zone_centers, radius: float) -> SplitSpec:
    """Records within ``radius`` (planar) of any zone centre are test records."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    centers = np.asarray(zone_centers, dtype=np.float64).reshape(-1, 2)
    if len(centers) == 0:
        raise ValueError("at least one zone centre is required")
    _check_keys(records)
    xy = np.array([r.pose[:2] for r in records]).reshape(-1, 2)
    dist = np.linalg.norm(xy[:, None, :] - centers[None, :, :], axis=2)
    in_zone = np.any(dist <= radius, axis=1)
    train = tuple(r.key for r, z in zip(records, in_zone) if not z)
    test = tuple(r.key for r, z in zip(records, in_zone) if z)
    if not train or not test:
        raise DegenerateSplitError(f"zone split leaves {len(train)} train / {len(test)} test records")
    return SplitSpec("zone", train, test, tuple(map(tuple, centers.tolist())), float(radius))


def make_interleaved_split(records: Sequence[ScanRecord]) -> SplitSpec:
    """Alternate records: even positions train, odd positions test."""
    if len(records) < 2:
        raise DegenerateSplitError("interleaved split needs at least two records")
    _check_keys(records)
    return SplitSpec(
        "interleaved",
        tuple(r.key for r in records[0::2]),
        tuple(r.key for r in records[1::2]),
    )


def make_run_split(records: Sequence[ScanRecord], test_sequence_ids: Sequence[str]) -> SplitSpec:
    """Whole sequences (runs) listed in ``test_sequence_ids`` become the test set."""
    _check_keys(records)
    present = {r.sequence_id for r in records}
    missing = set(test_sequence_ids) - present
    if missing:
        raise ValueError(f"unknown sequence ids: {sorted(missing)}")
    wanted = set(test_sequence_ids)
    train = tuple(r.key for r in records if r.sequence_id not in wanted)
    test = tuple(r.key for r in records if r.sequence_id in wanted)
    if not train:
        raise DegenerateSplitError("run split leaves no training records")
    return SplitSpec("run_based", train, test)
