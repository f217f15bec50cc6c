"""Deterministic synthetic vineyard scans.

The field is ``num_rows + 1`` parallel vine lines at ``y = k * row_spacing``
running along x from 0 to ``row_length``; traversal row ``i`` is the lane
between lines ``i`` and ``i + 1``.  Plant placement (jitter, trunk height,
missing plants) depends only on ``seed``, so traversals with different
seasons see identical geometry.  Per-scan sampling depends on
``(seed, pose, heading)``.

Each scan is made of
  * trunks: vertical segments from the ground to each plant's trunk top,
  * canopy: isotropic Gaussian blobs on the wire line at WIRE_HEIGHT, with
    ``round(season * canopy_density)`` points per plant,
  * grass: ground returns at ``grass_height`` (none when it is 0),
  * Gaussian position noise of ``noise_sigma``.
Occlusion is not modelled.  Returns thin out with range: a candidate point
at planar range r survives with probability ``min(1, (falloff_range / r)**2)``,
and nothing beyond MAX_RANGE is returned.  Clouds are expressed in a
ground-referenced sensor frame (x forward along the heading, z up from the
ground).
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cloud import PointCloud, ScanRecord

TRUNK_POINTS = 12
WIRE_HEIGHT = 1.2
CANOPY_SIGMA = 0.3
TRUNK_HEIGHT_RANGE = (0.8, 1.1)
PLANT_JITTER = 0.1  # fraction of plant_spacing
MISSING_PLANT_PROB = 0.08
GRASS_DENSITY = 2.0  # candidate returns per square metre
GRASS_MARGIN = 5.0
MAX_RANGE = 60.0


@dataclass(frozen=True)
class VineyardSpec:
    num_rows: int = 5
    row_length: float = 50.0
    row_spacing: float = 2.5
    plant_spacing: float = 1.0
    canopy_density: int = 30
    season: float = 0.0
    grass_height: float = 0.0
    noise_sigma: float = 0.02
    falloff_range: float = 8.0
    heading_jitter: float = 0.0
    lateral_jitter: float = 0.0
    grass_variability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_rows < 1:
            raise ValueError("num_rows must be >= 1")
        for name in ("row_length", "row_spacing", "plant_spacing", "falloff_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.canopy_density < 0:
            raise ValueError("canopy_density must be >= 0")
        if not 0.0 <= self.season <= 1.0:
            raise ValueError(f"season must lie in [0, 1], got {self.season}")
        if not 0.0 <= self.grass_variability <= 1.0:
            raise ValueError("grass_variability must lie in [0, 1]")
        for name in ("grass_height", "noise_sigma", "heading_jitter", "lateral_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class Plants:
    xy: np.ndarray  # (n, 2) planar trunk positions
    trunk_height: np.ndarray  # (n,)


def plant_layout(spec: VineyardSpec) -> Plants:
    rng = np.random.default_rng([spec.seed, 0x5EED])
    per_line = int(np.floor(spec.row_length / spec.plant_spacing + 1e-9)) + 1
    xs = np.arange(per_line) * spec.plant_spacing
    lines = np.arange(spec.num_rows + 1) * spec.row_spacing
    gx, gy = np.meshgrid(xs, lines)
    gx, gy = gx.ravel(), gy.ravel()
    jitter = rng.uniform(-PLANT_JITTER, PLANT_JITTER, size=gx.shape) * spec.plant_spacing
    height = rng.uniform(*TRUNK_HEIGHT_RANGE, size=gx.shape)
    present = rng.random(gx.shape) >= MISSING_PLANT_PROB
    xy = np.column_stack([gx + jitter, gy])[present]
    return Plants(xy, height[present])


def lane_y(spec: VineyardSpec, row: int) -> float:
    return (row + 0.5) * spec.row_spacing


def max_points(spec: VineyardSpec) -> int:
    """Upper bound on the size of any generated scan."""
    per_line = int(np.floor(spec.row_length / spec.plant_spacing + 1e-9)) + 1
    plants = per_line * (spec.num_rows + 1)
    canopy = int(round(spec.season * spec.canopy_density))
    return plants * (TRUNK_POINTS + canopy) + _grass_budget(spec)


def _grass_budget(spec: VineyardSpec) -> int:
    if spec.grass_height <= 0:
        return 0
    area = (spec.row_length + 2 * GRASS_MARGIN) * (spec.num_rows * spec.row_spacing + 2 * GRASS_MARGIN)
    return int(round(GRASS_DENSITY * area))


def _scan_seed(spec: VineyardSpec, pose, heading: float) -> np.random.SeedSequence:
    key = struct.pack("<4d", float(pose[0]), float(pose[1]), float(pose[2]) if len(pose) > 2 else 0.0, heading)
    return np.random.SeedSequence([spec.seed, zlib.crc32(key)])


def _thin(points: np.ndarray, origin: np.ndarray, spec: VineyardSpec, rng: np.random.Generator) -> np.ndarray:
    r = np.hypot(points[:, 0] - origin[0], points[:, 1] - origin[1])
    keep_prob = np.minimum(1.0, (spec.falloff_range / np.maximum(r, 1e-9)) ** 2)
    draws = rng.random(len(points))
    keep = (draws < keep_prob) & (np.linalg.norm(points - origin, axis=1) <= MAX_RANGE)
    return points[keep]


def generate_scan(spec: VineyardSpec, pose, heading: float = 0.0) -> PointCloud:
    """One sensor-frame scan taken at world ``pose`` looking along ``heading``."""
    pose = np.array([pose[0], pose[1], pose[2] if len(pose) > 2 else 0.0], dtype=np.float64)
    trunk_ss, canopy_ss, grass_ss, noise_ss = _scan_seed(spec, pose, heading).spawn(4)
    plants = plant_layout(spec)
    n_plants = len(plants.xy)

    rng = np.random.default_rng(trunk_ss)
    z = rng.random((n_plants, TRUNK_POINTS)) * plants.trunk_height[:, None]
    trunks = np.column_stack(
        [np.repeat(plants.xy, TRUNK_POINTS, axis=0), z.ravel()]
    )
    parts = [_thin(trunks, pose, spec, rng)]

    per_plant = int(round(spec.season * spec.canopy_density))
    if per_plant > 0:
        rng = np.random.default_rng(canopy_ss)
        centres = np.column_stack([plants.xy, np.full(n_plants, WIRE_HEIGHT)])
        blobs = np.repeat(centres, per_plant, axis=0) + rng.normal(0.0, CANOPY_SIGMA, size=(n_plants * per_plant, 3))
        parts.append(_thin(blobs, pose, spec, rng))

    budget = _grass_budget(spec)
    if budget > 0:
        rng = np.random.default_rng(grass_ss)
        if spec.grass_variability > 0:
            frac = 1.0 - spec.grass_variability * rng.random()
            budget = int(round(frac * budget))
        x = rng.uniform(-GRASS_MARGIN, spec.row_length + GRASS_MARGIN, budget)
        y = rng.uniform(-GRASS_MARGIN, spec.num_rows * spec.row_spacing + GRASS_MARGIN, budget)
        grass = np.column_stack([x, y, np.full(budget, spec.grass_height)])
        parts.append(_thin(grass, pose, spec, rng))

    world = np.concatenate(parts, axis=0)
    if spec.noise_sigma > 0:
        world = world + np.random.default_rng(noise_ss).normal(0.0, spec.noise_sigma, size=world.shape)

    c, s = np.cos(heading), np.sin(heading)
    rel = world - pose
    local = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]])
    return PointCloud(local, frame_id="sensor")


def traversal_poses(spec: VineyardSpec, row_indices: Sequence[int], step: float, x_offset: float = 0.0) -> list:
    if not step > 0:
        raise ValueError("step must be > 0")
    if len(row_indices) == 0:
        raise ValueError("row_indices must not be empty")
    count = int(np.floor((spec.row_length - x_offset) / step + 1e-9)) + 1
    poses = []
    for row in row_indices:
        if not 0 <= row < spec.num_rows:
            raise ValueError(f"row {row} outside 0..{spec.num_rows - 1}")
        y = lane_y(spec, row)
        poses += [(x_offset + k * step, y, 0.0) for k in range(count)]
    return poses


def generate_traversal(
    spec: VineyardSpec,
    row_indices: Sequence[int],
    step: float,
    reverse: bool = False,
    sequence_id: str = "synth",
    x_offset: float = 0.0,
    speed: float = 1.0,
) -> list[ScanRecord]:
    """Walk the listed lanes at ``step`` metres, one scan per stop.

    A reversed traversal visits the same poses in the opposite order with
    the sensor turned around.
    """
    poses = traversal_poses(spec, row_indices, step, x_offset)
    base_heading = 0.0
    if reverse:
        poses = poses[::-1]
        base_heading = float(np.pi)
    records = []
    for i, nominal in enumerate(poses):
        pose, heading = _jitter(spec, nominal, base_heading)
        records.append(
            ScanRecord(
                cloud=generate_scan(spec, pose, heading),
                pose=pose,
                timestamp=i * step / speed,
                sequence_id=sequence_id,
                heading=heading,
                scan_index=i,
            )
        )
    return records


def _jitter(spec: VineyardSpec, nominal, heading: float) -> tuple[tuple, float]:
    """Driving imperfection at one stop: uniform lateral offset and yaw error.

    Seeded by the nominal pose only, so traversals of the same stops in
    different seasons share identical poses.
    """
    if spec.lateral_jitter == 0 and spec.heading_jitter == 0:
        return tuple(nominal), heading
    key = struct.pack("<4d", *nominal, heading)
    rng = np.random.default_rng([spec.seed, 0x7A11, zlib.crc32(key)])
    dy = rng.uniform(-spec.lateral_jitter, spec.lateral_jitter)
    dh = rng.uniform(-spec.heading_jitter, spec.heading_jitter)
    return (nominal[0], nominal[1] + dy, nominal[2]), heading + dh
