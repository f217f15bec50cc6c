"""File formats: PCD scans, raw xyzi dumps, pose CSV, dataset manifests and
descriptor stores.

Parsers reject malformed input with a specific exception; nothing is
silently repaired.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import tomli
import tomli_w

from .cloud import EmptyCloudError, NormalizationParams, PointCloud, ScanRecord, filter_cloud, subsample_trajectory

log = logging.getLogger(__name__)

POSE_WINDOW = 0.1  # seconds; half the 10 Hz scan period


class FormatError(ValueError):
    pass


class PcdError(FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PcdTruncatedError(PcdError):
    pass


class PcdEncodingError(PcdError):
    pass


class PoseCsvError(FormatError):
    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ManifestError(FormatError):
    pass


class StoreError(FormatError):
    pass


class StoreChecksumError(StoreError):
    pass


class StoreVersionError(StoreError):
    pass


# ------------------------------------------------------------------ PCD
_PCD_TYPES = {
    ("F", 4): "f4", ("F", 8): "f8",
    ("I", 1): "i1", ("I", 2): "i2", ("I", 4): "i4", ("I", 8): "i8",
    ("U", 1): "u1", ("U", 2): "u2", ("U", 4): "u4", ("U", 8): "u8",
}
_PCD_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")


def _parse_pcd_header(data: bytes) -> tuple[dict, int]:
    header: dict = {}
    pos = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise PcdError("header ended before a DATA line", pos)
        raw = data[pos:end]
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PcdError("non-ASCII byte in header", pos) from None
        if line and not line.startswith("#"):
            key, _, rest = line.partition(" ")
            key = key.upper()
            if key not in _PCD_KEYS:
                raise PcdError(f"unknown header key {key!r}", pos)
            header[key] = (rest.split(), pos)
            if key == "DATA":
                return header, end + 1
        pos = end + 1


def parse_pcd(data: bytes) -> PointCloud:
    """Read an ASCII or binary PCD v0.7 file with at least fields x y z."""
    header, body = _parse_pcd_header(data)

    def get(key, required=True):
        if key not in header:
            if required:
                raise PcdError(f"missing {key} line", body)
            return None, body
        return header[key]

    fields, fpos = get("FIELDS")
    for axis in ("x", "y", "z"):
        if axis not in fields:
            raise PcdError(f"FIELDS lacks {axis!r}", fpos)
    sizes, spos = get("SIZE")
    types, tpos = get("TYPE")
    counts, cpos = get("COUNT", required=False)
    counts = counts or ["1"] * len(fields)
    if not (len(sizes) == len(types) == len(counts) == len(fields)):
        raise PcdError("FIELDS/SIZE/TYPE/COUNT lengths differ", spos)
    try:
        width = int(get("WIDTH")[0][0])
        height = int(get("HEIGHT", required=False)[0][0]) if "HEIGHT" in header else 1
        npoints = int(header["POINTS"][0][0]) if "POINTS" in header else width * height
        sizes = [int(s) for s in sizes]
        counts = [int(c) for c in counts]
    except (ValueError, IndexError):
        raise PcdError("malformed integer in header", get("WIDTH")[1]) from None
    if width * height != npoints:
        raise PcdError(f"WIDTH*HEIGHT={width * height} but POINTS={npoints}", get("WIDTH")[1])
    dtype_fields = []
    for name, size, typ, count in zip(fields, sizes, types, counts):
        code = _PCD_TYPES.get((typ.upper(), size))
        if code is None or count < 1:
            raise PcdError(f"unsupported field type {typ}{size} x{count}", tpos)
        dtype_fields.append((name, "<" + code, (count,)) if count > 1 else (name, "<" + code))
    dtype = np.dtype(dtype_fields)

    encoding, dpos = header["DATA"]
    encoding = encoding[0].lower() if encoding else ""
    if encoding == "binary":
        need = npoints * dtype.itemsize
        payload = data[body:]
        if len(payload) < need:
            raise PcdTruncatedError(
                f"payload holds {len(payload)} bytes, header needs {need}", body + len(payload)
            )
        if len(payload) > need:
            raise PcdError(f"{len(payload) - need} trailing bytes after payload", body + need)
        table = np.frombuffer(payload, dtype=dtype, count=npoints)
    elif encoding == "ascii":
        table = _parse_ascii_rows(data, body, npoints, dtype, sum(counts))
    else:
        raise PcdEncodingError(f"unsupported DATA encoding {encoding!r}", dpos)

    pts = np.column_stack([table["x"], table["y"], table["z"]]).astype(np.float64)
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(pts), axis=1))[0])
        raise PcdError(f"non-finite coordinates in point {bad}", body)
    inten = None
    if "intensity" in fields:
        inten = np.asarray(table["intensity"], dtype=np.float64).reshape(npoints, -1)
        if inten.shape[1] != 1:
            raise PcdError("intensity must be a scalar field", fpos)
        inten = inten[:, 0]
    return PointCloud(pts, inten)


def _parse_ascii_rows(data: bytes, start: int, npoints: int, dtype: np.dtype, ncols: int) -> np.ndarray:
    table = np.zeros(npoints, dtype=dtype)
    pos = start
    row = 0
    while row < npoints:
        if pos >= len(data):
            raise PcdTruncatedError(f"expected {npoints} rows, found {row}", pos)
        end = data.find(b"\n", pos)
        end = len(data) if end < 0 else end
        tokens = data[pos:end].split()
        if tokens:
            if len(tokens) != ncols:
                raise PcdError(f"row {row} has {len(tokens)} values, expected {ncols}", pos)
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise PcdError(f"unparsable value in row {row}", pos) from None
            k = 0
            for name in dtype.names:
                sub = dtype[name].shape
                width = sub[0] if sub else 1
                table[name][row] = values[k] if not sub else values[k : k + width]
                k += width
            row += 1
        pos = end + 1
    if data[pos:].strip():
        raise PcdError("unexpected data after the last row", pos)
    return table


def write_pcd(cloud: PointCloud, binary: bool = True) -> bytes:
    """Serialize as PCD v0.7 with float64 fields (exact round trip)."""
    fields = ["x", "y", "z"] + (["intensity"] if cloud.intensity is not None else [])
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if cloud.intensity is not None:
        cols.append(cloud.intensity)
    n = len(cloud)
    head = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        f"FIELDS {' '.join(fields)}\n"
        f"SIZE {' '.join('8' for _ in fields)}\n"
        f"TYPE {' '.join('F' for _ in fields)}\n"
        f"COUNT {' '.join('1' for _ in fields)}\n"
        f"WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\n"
        f"DATA {'binary' if binary else 'ascii'}\n"
    ).encode("ascii")
    table = np.column_stack(cols) if n else np.zeros((0, len(fields)))
    if binary:
        return head + np.ascontiguousarray(table, dtype="<f8").tobytes()
    lines = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in table)
    return head + lines.encode("ascii")


# -------------------------------------------------------------- raw xyzi
def parse_raw_xyzi(data: bytes) -> PointCloud:
    """Flat little-endian float32 records of x, y, z, intensity."""
    if len(data) % 16:
        raise FormatError(f"raw xyzi length {len(data)} is not a multiple of 16")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(arr[:, :3], arr[:, 3])


def write_raw_xyzi(cloud: PointCloud) -> bytes:
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    return np.column_stack([cloud.points, inten]).astype("<f4").tobytes()


# ------------------------------------------------------------- pose CSV
class PoseRow(NamedTuple):
    timestamp: float
    x: float
    y: float
    z: float = 0.0
    heading: Optional[float] = None


def parse_pose_csv(data: bytes) -> list[PoseRow]:
    """Rows of ``timestamp,x,y[,z][,heading]``; row numbers count the header as 1."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PoseCsvError(f"not UTF-8: {exc}") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise PoseCsvError("empty pose file") from None
    missing = [c for c in ("timestamp", "x", "y") if c not in header]
    if missing:
        raise PoseCsvError(f"missing column(s): {', '.join(missing)}", 1)
    col = {name: header.index(name) for name in ("timestamp", "x", "y", "z", "heading") if name in header}
    rows = []
    for lineno, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) != len(header):
            raise PoseCsvError(f"expected {len(header)} cells, got {len(cells)}", lineno)
        values = {}
        for name, idx in col.items():
            if name == "heading" and not cells[idx].strip():
                continue  # heading is optional per row
            try:
                v = float(cells[idx])
            except ValueError:
                raise PoseCsvError(f"cannot parse {name}={cells[idx]!r}", lineno) from None
            if not math.isfinite(v):
                raise PoseCsvError(f"non-finite {name}", lineno)
            values[name] = v
        rows.append(PoseRow(**values))
    return rows


def write_pose_csv(rows: Sequence[PoseRow]) -> bytes:
    with_heading = any(r.heading is not None for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "x", "y", "z"] + (["heading"] if with_heading else []))
    for r in rows:
        line = [repr(r.timestamp), repr(r.x), repr(r.y), repr(r.z)]
        if with_heading:
            line.append("" if r.heading is None else repr(r.heading))
        w.writerow(line)
    return buf.getvalue().encode("utf-8")


# ------------------------------------------------------------- manifest
@dataclass(frozen=True)
class SequenceEntry:
    sequence_id: str
    scan_directory: str
    pose_file: str
    sensor_label: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    sequences: tuple
    sampling_distance: float = 1.0
    match_threshold: float = 5.0
    zone_centers: tuple = ()
    zone_radius: Optional[float] = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [s.sequence_id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise ManifestError("sequence ids must be unique")
        if self.sampling_distance < 0:
            raise ManifestError("sampling_distance must be >= 0 (0 disables subsampling)")
        if not self.match_threshold > 0:
            raise ManifestError("match_threshold must be > 0")


_MANIFEST_KEYS = {"name", "sequences", "sampling_distance", "match_threshold", "zone_centers", "zone_radius"}
_SEQUENCE_KEYS = {"sequence_id", "scan_directory", "pose_file", "sensor_label"}


def parse_manifest(text: str, root: Path = Path(".")) -> DatasetManifest:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ManifestError(f"manifest is not valid TOML: {exc}") from None
    unknown = set(raw) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    if "name" not in raw or "sequences" not in raw:
        raise ManifestError("manifest needs 'name' and at least one [[sequences]] table")
    seqs = []
    for s in raw["sequences"]:
        bad = set(s) - _SEQUENCE_KEYS
        if bad:
            raise ManifestError(f"unknown sequence keys: {sorted(bad)}")
        try:
            seqs.append(SequenceEntry(**s))
        except TypeError as exc:
            raise ManifestError(f"bad sequence entry: {exc}") from None
    return DatasetManifest(
        name=raw["name"],
        sequences=tuple(seqs),
        sampling_distance=float(raw.get("sampling_distance", 1.0)),
        match_threshold=float(raw.get("match_threshold", 5.0)),
        zone_centers=tuple(tuple(float(v) for v in c) for c in raw.get("zone_centers", ())),
        zone_radius=float(raw["zone_radius"]) if "zone_radius" in raw else None,
        root=Path(root),
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


def dump_manifest(manifest: DatasetManifest) -> str:
    raw: dict = {
        "name": manifest.name,
        "sampling_distance": manifest.sampling_distance,
        "match_threshold": manifest.match_threshold,
    }
    if manifest.zone_centers:
        raw["zone_centers"] = [list(c) for c in manifest.zone_centers]
    if manifest.zone_radius is not None:
        raw["zone_radius"] = manifest.zone_radius
    raw["sequences"] = [
        {
            "sequence_id": s.sequence_id,
            "scan_directory": s.scan_directory,
            "pose_file": s.pose_file,
            "sensor_label": s.sensor_label,
        }
        for s in manifest.sequences
    ]
    return tomli_w.dumps(raw)


# --------------------------------------------------------- dataset load
SCAN_SUFFIXES = (".pcd", ".bin")


def scan_filename(timestamp: float, suffix: str = ".pcd") -> str:
    return f"{timestamp:017.6f}{suffix}"


def read_scan(path: Path) -> PointCloud:
    data = Path(path).read_bytes()
    if path.suffix == ".bin":
        return parse_raw_xyzi(data)
    return parse_pcd(data)


@dataclass
class LoadedDataset:
    records: list
    unmatched_scans: int = 0
    empty_scans: int = 0

    @property
    def skipped(self) -> int:
        return self.unmatched_scans + self.empty_scans


def _load_sequence(manifest: DatasetManifest, seq: SequenceEntry, params: NormalizationParams) -> LoadedDataset:
    scan_dir = manifest.root / seq.scan_directory
    poses = parse_pose_csv((manifest.root / seq.pose_file).read_bytes())
    if not poses:
        raise FormatError(f"sequence {seq.sequence_id}: pose file has no rows")
    order = np.argsort([p.timestamp for p in poses], kind="stable")
    poses = [poses[i] for i in order]
    pose_t = np.array([p.timestamp for p in poses])

    scans = []
    for path in scan_dir.iterdir():
        if path.suffix in SCAN_SUFFIXES:
            try:
                scans.append((float(path.stem), path))
            except ValueError:
                raise FormatError(f"scan file name is not a timestamp: {path.name}") from None
    scans.sort()

    out = LoadedDataset([])
    for index, (ts, path) in enumerate(scans):
        j = int(np.searchsorted(pose_t, ts))
        best = min((k for k in (j - 1, j) if 0 <= k < len(pose_t)), key=lambda k: abs(pose_t[k] - ts))
        if abs(pose_t[best] - ts) > POSE_WINDOW:
            out.unmatched_scans += 1
            continue
        try:
            cloud = filter_cloud(read_scan(path), params)
        except EmptyCloudError:
            out.empty_scans += 1
            continue
        p = poses[best]
        out.records.append(
            ScanRecord(cloud, (p.x, p.y, p.z), ts, seq.sequence_id, p.heading, index)
        )
    if manifest.sampling_distance > 0:
        out.records = subsample_trajectory(out.records, manifest.sampling_distance)
    return out


def load_dataset(manifest: DatasetManifest, params: NormalizationParams = NormalizationParams()) -> LoadedDataset:
    """Pair scans with poses, filter, and distance-subsample every sequence.

    Sequences are merged in manifest order.  Scans without a pose within
    POSE_WINDOW seconds, and scans left empty by filtering, are skipped and
    counted.
    """
    total = LoadedDataset([])
    for seq in manifest.sequences:
        part = _load_sequence(manifest, seq, params)
        total.records += part.records
        total.unmatched_scans += part.unmatched_scans
        total.empty_scans += part.empty_scans
    if total.skipped:
        log.warning(
            "skipped %d scans (%d without pose, %d empty)", total.skipped, total.unmatched_scans, total.empty_scans
        )
    return total


def write_sequence(records: Sequence[ScanRecord], root: Path, sequence_id: str) -> SequenceEntry:
    """Write records as ``<sequence_id>/scans/*.pcd`` plus ``<sequence_id>/poses.csv``."""
    root = Path(root)
    scan_dir = root / sequence_id / "scans"
    scan_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        (scan_dir / scan_filename(rec.timestamp)).write_bytes(write_pcd(rec.cloud))
        rows.append(PoseRow(rec.timestamp, *rec.pose, rec.heading))
    (root / sequence_id / "poses.csv").write_bytes(write_pose_csv(rows))
    return SequenceEntry(sequence_id, f"{sequence_id}/scans", f"{sequence_id}/poses.csv", "synthetic")


# ----------------------------------------------------- descriptor store
STORE_MAGIC = b"VLPRDESC"
STORE_VERSION = 1


@dataclass
class StoreEntry:
    vector: np.ndarray
    pose: tuple


@dataclass
class DescriptorStore:
    descriptor_dim: int
    method_label: str
    entries: dict = field(default_factory=dict)  # (sequence_id, scan_index) -> StoreEntry

    def __post_init__(self):
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be >= 1")

    def add(self, key: tuple, vector, pose) -> None:
        vec = np.asarray(vector, dtype=np.float64).reshape(-1)
        if vec.shape[0] != self.descriptor_dim:
            raise ValueError(f"vector length {vec.shape[0]} != store dim {self.descriptor_dim}")
        pose = tuple(float(v) for v in pose)
        pose = pose + (0.0,) * (3 - len(pose))
        self.entries[(str(key[0]), int(key[1]))] = StoreEntry(vec.copy(), pose)

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list:
        return list(self.entries)

    def vectors(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.descriptor_dim))
        return np.stack([e.vector for e in self.entries.values()])

    def poses(self) -> np.ndarray:
        return np.array([e.pose for e in self.entries.values()]).reshape(-1, 3)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DescriptorStore):
            return NotImplemented
        if (self.descriptor_dim, self.method_label) != (other.descriptor_dim, other.method_label):
            return False
        if list(self.entries) != list(other.entries):
            return False
        return all(
            np.array_equal(a.vector, b.vector) and a.pose == b.pose
            for a, b in zip(self.entries.values(), other.entries.values())
        )


def save_store(store: DescriptorStore) -> bytes:
    """Binary layout: magic, u16 version, checksummed header, checksummed entries."""
    label = store.method_label.encode("utf-8")
    header = struct.pack("<IH", store.descriptor_dim, len(label)) + label + struct.pack("<I", len(store))
    parts = [STORE_MAGIC, struct.pack("<H", STORE_VERSION), header, struct.pack("<I", zlib.crc32(header))]
    for (seq, idx), entry in store.entries.items():
        sid = seq.encode("utf-8")
        body = (
            struct.pack("<H", len(sid)) + sid + struct.pack("<I3d", idx, *entry.pose)
            + np.ascontiguousarray(entry.vector, dtype="<f8").tobytes()
        )
        parts += [body, struct.pack("<I", zlib.crc32(body))]
    return b"".join(parts)


def load_store(blob: bytes) -> DescriptorStore:
    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise StoreError(f"store truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(8) != STORE_MAGIC:
        raise StoreError("not a descriptor store (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != STORE_VERSION:
        raise StoreVersionError(f"unsupported store version {version}")
    head_start = pos
    dim, label_len = struct.unpack("<IH", take(6))
    label = take(label_len)
    (count,) = struct.unpack("<I", take(4))
    header = blob[head_start:pos]
    (crc,) = struct.unpack("<I", take(4))
    if zlib.crc32(header) != crc:
        raise StoreChecksumError("store header checksum mismatch")
    store = DescriptorStore(dim, label.decode("utf-8"))
    for i in range(count):
        start = pos
        (sid_len,) = struct.unpack("<H", take(2))
        sid = take(sid_len)
        idx, x, y, z = struct.unpack("<I3d", take(28))
        vec = np.frombuffer(take(8 * dim), dtype="<f8").astype(np.float64)
        body = blob[start:pos]
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(body) != crc:
            raise StoreChecksumError(f"checksum mismatch in entry {i}")
        try:
            seq = sid.decode("utf-8")
        except UnicodeDecodeError:
            raise StoreError(f"entry {i}: sequence id is not UTF-8") from None
        store.add((seq, idx), vec, (x, y, z))
    if pos != len(blob):
        raise StoreError(f"{len(blob) - pos} trailing bytes after the last entry")
    return store
