"""Non-learned global descriptors: Scan Context and mean-pooled FPFH."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .cloud import EmptyCloudError, NormalizationParams, PointCloud, filter_cloud, quantize_cloud


@dataclass(frozen=True)
class ScanContextParams:
    num_rings: int = 20
    num_sectors: int = 60
    max_range: float = 60.0
    voxel_size: float = 0.1

    def __post_init__(self):
        if self.num_rings < 1 or self.num_sectors < 1:
            raise ValueError("num_rings and num_sectors must be >= 1")
        if not self.max_range > 0 or not self.voxel_size > 0:
            raise ValueError("max_range and voxel_size must be > 0")

    @property
    def dim(self) -> int:
        return self.num_rings * self.num_sectors


@dataclass(frozen=True)
class FpfhParams:
    voxel_size: float = 0.15
    normal_radius: float = 0.5
    bins_per_feature: int = 11

    def __post_init__(self):
        if not (self.voxel_size > 0 and self.normal_radius > 0 and self.bins_per_feature > 0):
            raise ValueError("FPFH parameters must be positive")

    @property
    def dim(self) -> int:
        return 3 * self.bins_per_feature


# ------------------------------------------------------------ Scan Context
def scan_context(cloud: PointCloud, params: ScanContextParams = ScanContextParams()) -> np.ndarray:
    """Polar max-height grid flattened row-major (ring-major).

    Rings split [0, max_range] uniformly by planar radius, sectors split
    [0, 2*pi) by azimuth.  Empty bins are 0.  Points beyond max_range are
    ignored.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("scan_context needs a non-empty cloud")
    pts = cloud.points
    r = np.hypot(pts[:, 0], pts[:, 1])
    inside = r <= params.max_range
    if not np.any(inside):
        raise EmptyCloudError("no points within max_range")
    pts, r = pts[inside], r[inside]
    theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
    ring = np.minimum((r / (params.max_range / params.num_rings)).astype(np.int64), params.num_rings - 1)
    sector = np.minimum((theta / (2 * np.pi / params.num_sectors)).astype(np.int64), params.num_sectors - 1)
    flat = ring * params.num_sectors + sector
    desc = np.full(params.dim, -np.inf)
    np.maximum.at(desc, flat, pts[:, 2])
    desc[np.isneginf(desc)] = 0.0
    return desc


def scan_context_descriptor(cloud: PointCloud, params: ScanContextParams = ScanContextParams()) -> np.ndarray:
    """Raw sensor-frame cloud -> range/zero filter -> voxel grid -> Scan Context."""
    filtered = filter_cloud(cloud, NormalizationParams(max_range=params.max_range))
    return scan_context(quantize_cloud(filtered, params.voxel_size), params)


# ------------------------------------------------------------------ FPFH
def estimate_normals(cloud: PointCloud, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals over radius neighbourhoods (the point itself included).

    Returns ``(normals, valid)``.  Normals face the sensor origin; points
    with fewer than three neighbourhood members get a NaN normal and
    ``valid`` False.
    """
    if not radius > 0:
        raise ValueError("radius must be > 0")
    pts = cloud.points
    n = len(pts)
    normals = np.full((n, 3), np.nan)
    valid = np.zeros(n, dtype=bool)
    if n == 0:
        return normals, valid
    tree = cKDTree(pts)
    for i, nbrs in enumerate(tree.query_ball_point(pts, radius)):
        if len(nbrs) < 3:
            continue
        local = pts[nbrs]
        cov = np.cov(local, rowvar=False, bias=True)
        _, vecs = np.linalg.eigh(cov)
        normal = vecs[:, 0]
        if np.dot(normal, -pts[i]) < 0:
            normal = -normal
        normals[i] = normal / np.linalg.norm(normal)
        valid[i] = True
    return normals, valid


def pair_features(ps, ns, pt, nt) -> Optional[tuple[float, float, float]]:
    """Darboux-frame pair features ``(alpha, phi, theta)`` for one point pair."""
    out = _pair_features(*(np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (ps, ns, pt, nt)))
    feats, ok = out
    return tuple(float(v) for v in feats[0]) if ok[0] else None


def _pair_features(ps, ns, pt, nt) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pair features over rows.

    The frame origin is whichever endpoint's normal makes the smaller angle
    with the connecting line.  Rows with coincident points or a degenerate
    frame come back with ``ok`` False.
    """
    d = pt - ps
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 0
    d = d / np.where(ok, dist, 1.0)[:, None]
    angle_s = np.einsum("ij,ij->i", ns, d)
    angle_t = np.einsum("ij,ij->i", nt, d)
    swap = np.arccos(np.minimum(np.abs(angle_s), 1.0)) > np.arccos(np.minimum(np.abs(angle_t), 1.0))
    u = np.where(swap[:, None], nt, ns)
    n2 = np.where(swap[:, None], ns, nt)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -angle_t, angle_s)
    v = np.cross(d, u)
    vnorm = np.linalg.norm(v, axis=1)
    ok &= vnorm > 0
    v = v / np.where(vnorm > 0, vnorm, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, n2)
    theta = np.arctan2(np.einsum("ij,ij->i", w, n2), np.einsum("ij,ij->i", u, n2))
    return np.column_stack([alpha, phi, theta]), ok


def _bins(values: np.ndarray, lo: float, hi: float, nbins: int) -> np.ndarray:
    b = np.floor(nbins * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, nbins - 1)


def _directed_pairs(points: np.ndarray, valid: np.ndarray, radius: float) -> np.ndarray:
    """All ordered (i, j), i != j, both valid, within ``radius``; sorted."""
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = pairs[valid[pairs[:, 0]] & valid[pairs[:, 1]]]
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    return both[np.lexsort((both[:, 1], both[:, 0]))]


def spfh(points: np.ndarray, normals: np.ndarray, pairs: np.ndarray, nbins: int) -> np.ndarray:
    """Simplified point feature histograms, one row per point.

    Each sub-histogram of point i is divided by its number of valid
    neighbours, so it sums to one unless some pairs were degenerate.
    """
    n = len(points)
    out = np.zeros((n, 3 * nbins))
    if len(pairs) == 0:
        return out
    src, dst = pairs[:, 0], pairs[:, 1]
    feats, ok = _pair_features(points[src], normals[src], points[dst], normals[dst])
    counts = np.bincount(src, minlength=n).astype(np.float64)
    weight = 1.0 / counts[src]
    ranges = ((-1.0, 1.0), (-1.0, 1.0), (-np.pi, np.pi))
    for f, (lo, hi) in enumerate(ranges):
        cols = f * nbins + _bins(feats[:, f], lo, hi, nbins)
        np.add.at(out, (src[ok], cols[ok]), weight[ok])
    return out


def fpfh_global(
    cloud: PointCloud,
    params: FpfhParams = FpfhParams(),
    normals: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """Mean of per-point FPFH signatures, L2-normalized.

    ``FPFH(p) = SPFH(p) + (1/k) * sum_q SPFH(q) / |p - q|`` over the k
    valid neighbours within ``normal_radius``.  The cloud is expected to be
    voxelized already; normals are estimated when not supplied.
    """
    pts = cloud.points
    if normals is None:
        normals = estimate_normals(cloud, params.normal_radius)
    nrm, valid = normals
    if int(np.count_nonzero(valid)) < 2:
        raise EmptyCloudError("FPFH needs at least two points with valid normals")
    pairs = _directed_pairs(pts, valid, params.normal_radius)
    hist = spfh(pts, nrm, pairs, params.bins_per_feature)
    fpfh = hist.copy()
    if len(pairs):
        src, dst = pairs[:, 0], pairs[:, 1]
        dist = np.linalg.norm(pts[src] - pts[dst], axis=1)
        counts = np.bincount(src, minlength=len(pts)).astype(np.float64)
        acc = np.zeros_like(hist)
        np.add.at(acc, src, hist[dst] / dist[:, None])
        has = counts > 0
        fpfh[has] += acc[has] / counts[has, None]
    pooled = fpfh[valid].mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm == 0.0:
        raise EmptyCloudError("FPFH histogram is empty (no valid point pairs)")
    return pooled / norm


def fpfh_descriptor(cloud: PointCloud, params: FpfhParams = FpfhParams(), max_range: float = 60.0) -> np.ndarray:
    """Raw sensor-frame cloud -> range/zero filter -> voxel grid -> FPFH global."""
    filtered = filter_cloud(cloud, NormalizationParams(max_range=max_range))
    return fpfh_global(quantize_cloud(filtered, params.voxel_size), params)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
