import struct

import numpy as np
import numpy.testing as npt
import pytest

from oracles import greedy_subsample
from vinelpr.cloud import PointCloud
from vinelpr.ingest import (
    DatasetManifest,
    DescriptorStore,
    FormatError,
    ManifestError,
    PcdEncodingError,
    PcdError,
    PcdTruncatedError,
    PoseCsvError,
    PoseRow,
    SequenceEntry,
    StoreChecksumError,
    StoreError,
    StoreVersionError,
    dump_manifest,
    load_dataset,
    load_manifest,
    load_store,
    parse_manifest,
    parse_pcd,
    parse_pose_csv,
    parse_raw_xyzi,
    save_store,
    scan_filename,
    write_pcd,
    write_pose_csv,
    write_raw_xyzi,
)

ASCII_PCD = b"""# .PCD v0.7
VERSION 0.7
FIELDS x y z intensity
SIZE 4 4 4 4
TYPE F F F F
COUNT 1 1 1 1
WIDTH 3
HEIGHT 1
VIEWPOINT 0 0 0 1 0 0 0
POINTS 3
DATA ascii
1.0 2.0 3.0 0.5
-1.5 0.25 4.0 0.1
7 8 9 1
"""


def pcd_header(n, encoding="ascii"):
    return (
        f"VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n"
        f"WIDTH {n}\nHEIGHT 1\nPOINTS {n}\nDATA {encoding}\n"
    ).encode()


class TestPcd:
    def test_ascii_read(self):
        c = parse_pcd(ASCII_PCD)
        npt.assert_array_equal(c.points, [[1, 2, 3], [-1.5, 0.25, 4], [7, 8, 9]])
        npt.assert_allclose(c.intensity, [0.5, 0.1, 1.0])

    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip(self, rng, binary):
        c = PointCloud(rng.normal(size=(40, 3)), intensity=rng.uniform(size=40))
        back = parse_pcd(write_pcd(c, binary=binary))
        assert back.points.tobytes() == c.points.tobytes()
        assert back.intensity.tobytes() == c.intensity.tobytes()

    def test_float32_binary(self):
        pts = np.array([[1, 2, 3], [4, 5, 6]], dtype="<f4")
        c = parse_pcd(pcd_header(2, "binary") + pts.tobytes())
        npt.assert_array_equal(c.points, pts.astype(float))
        assert c.intensity is None

    def test_ascii_truncated(self):
        rows = b"".join(b"1 2 3\n" for _ in range(9))
        with pytest.raises(PcdTruncatedError):
            parse_pcd(pcd_header(10) + rows)

    def test_binary_truncated_reports_offset(self):
        blob = pcd_header(10, "binary") + np.zeros((9, 3), dtype="<f4").tobytes()
        with pytest.raises(PcdTruncatedError) as info:
            parse_pcd(blob)
        assert info.value.offset == len(blob)

    def test_unknown_encoding(self):
        with pytest.raises(PcdEncodingError):
            parse_pcd(pcd_header(1, "binary_compressed") + b"\0" * 12)

    def test_missing_z(self):
        blob = b"VERSION 0.7\nFIELDS x y\nSIZE 4 4\nTYPE F F\nWIDTH 1\nPOINTS 1\nDATA ascii\n1 2\n"
        with pytest.raises(PcdError):
            parse_pcd(blob)

    def test_width_height_mismatch(self):
        blob = pcd_header(2).replace(b"POINTS 2", b"POINTS 3") + b"1 2 3\n" * 3
        with pytest.raises(PcdError):
            parse_pcd(blob)

    def test_no_data_line(self):
        with pytest.raises(PcdError):
            parse_pcd(b"VERSION 0.7\nFIELDS x y z\n")

    def test_trailing_rows_rejected(self):
        with pytest.raises(PcdError):
            parse_pcd(pcd_header(1) + b"1 2 3\n4 5 6\n")


class TestRaw:
    def test_two_points(self):
        blob = struct.pack("<8f", 1, 2, 3, 0.5, 4, 5, 6, 0.1)
        c = parse_raw_xyzi(blob)
        npt.assert_array_equal(c.points, [[1, 2, 3], [4, 5, 6]])
        npt.assert_allclose(c.intensity, [0.5, 0.1], rtol=1e-7)

    def test_empty(self):
        assert len(parse_raw_xyzi(b"")) == 0

    def test_bad_length(self):
        with pytest.raises(FormatError):
            parse_raw_xyzi(b"\0" * 17)

    def test_round_trip(self):
        c = PointCloud(np.array([[1.5, -2.0, 0.25]]), intensity=[3.0])
        back = parse_raw_xyzi(write_raw_xyzi(c))
        npt.assert_array_equal(back.points, c.points)


class TestPoseCsv:
    def test_three_rows(self):
        rows = parse_pose_csv(b"timestamp,x,y\n0,1,2\n1,3,4\n2,5,6\n")
        assert rows == [PoseRow(0, 1, 2), PoseRow(1, 3, 4), PoseRow(2, 5, 6)]
        assert rows[0].z == 0.0 and rows[0].heading is None

    def test_optional_columns(self):
        rows = parse_pose_csv(b"timestamp,x,y,z,heading\n0,1,2,3,0.5\n")
        assert rows == [PoseRow(0, 1, 2, 3, 0.5)]

    def test_missing_x(self):
        with pytest.raises(PoseCsvError):
            parse_pose_csv(b"timestamp,y\n0,1\n")

    def test_bad_cell_names_row_two(self):
        with pytest.raises(PoseCsvError) as info:
            parse_pose_csv(b"timestamp,x,y\n0,abc,2\n")
        assert info.value.row == 2
        assert "row 2" in str(info.value)

    def test_round_trip(self):
        rows = [PoseRow(0.1, 1.0, 2.0, 0.0, None), PoseRow(0.2, 1.5, 2.5, 0.5, 1.0)]
        back = parse_pose_csv(write_pose_csv(rows))
        assert back[1] == rows[1] and back[0].heading is None


def write_dataset(root, times, xs, pose_times=None, sampling=0.0):
    scans = root / "s" / "scans"
    scans.mkdir(parents=True)
    cloud = PointCloud(np.array([[1.0, 0, 0], [0, 2.0, 0]]))
    for t in times:
        (scans / scan_filename(t)).write_bytes(write_pcd(cloud))
    pose_times = times if pose_times is None else pose_times
    (root / "s" / "poses.csv").write_bytes(write_pose_csv([PoseRow(t, x, 0.0) for t, x in zip(pose_times, xs)]))
    manifest = DatasetManifest("test", (SequenceEntry("s", "s/scans", "s/poses.csv"),), sampling_distance=sampling)
    (root / "manifest.toml").write_text(dump_manifest(manifest))
    return load_manifest(root / "manifest.toml")


class TestLoadDataset:
    def test_exact_matches(self, tmp_path):
        times = [0.1 * i for i in range(10)]
        ds = load_dataset(write_dataset(tmp_path, times, list(range(10))))
        assert len(ds.records) == 10 and ds.skipped == 0
        assert [r.pose[0] for r in ds.records] == list(range(10))
        assert all(r.sequence_id == "s" for r in ds.records)

    def test_ten_hertz_one_metre(self, tmp_path):
        times = [round(0.1 * i, 6) for i in range(100)]
        xs = [0.1 * i for i in range(100)]
        ds = load_dataset(write_dataset(tmp_path, times, xs, sampling=1.0))
        expected = greedy_subsample([(x, 0.0) for x in xs], 1.0)
        assert [r.scan_index for r in ds.records] == expected
        assert 9 <= len(ds.records) <= 11

    def test_scan_without_pose_skipped(self, tmp_path):
        times = [0.0, 1.0, 2.0]
        ds = load_dataset(write_dataset(tmp_path, times, [0, 1, 2], pose_times=[0.0, 1.5, 2.0]))
        assert len(ds.records) == 2
        assert ds.unmatched_scans == 1

    def test_deterministic(self, tmp_path):
        m = write_dataset(tmp_path, [0.0, 0.1, 0.2], [0, 1, 2])
        a, b = load_dataset(m), load_dataset(m)
        assert [(r.pose, r.cloud) for r in a.records] == [(r.pose, r.cloud) for r in b.records]


class TestManifest:
    TEXT = """
name = "v"
sampling_distance = 1.0
[[sequences]]
sequence_id = "a"
scan_directory = "a/scans"
pose_file = "a/poses.csv"
"""

    def test_parse(self):
        m = parse_manifest(self.TEXT)
        assert m.name == "v" and m.match_threshold == 5.0
        assert m.sequences[0].sequence_id == "a"

    def test_round_trip(self):
        m = parse_manifest(self.TEXT)
        assert parse_manifest(dump_manifest(m)) == m

    def test_unknown_key(self):
        with pytest.raises(ManifestError):
            parse_manifest(self.TEXT.replace("name", "nmae"))

    def test_duplicate_sequence(self):
        seq = SequenceEntry("a", "x", "y")
        with pytest.raises(ManifestError):
            DatasetManifest("n", (seq, seq))

    def test_bad_threshold(self):
        with pytest.raises(ManifestError):
            DatasetManifest("n", (), match_threshold=0.0)


class TestStore:
    def make(self):
        s = DescriptorStore(4, "head")
        s.add(("a", 0), [0.1, 0.2, 0.3, 0.4], (1.0, 2.0))
        s.add(("b", 7), [1e-300, -0.0, np.pi, 5.0], (3.0, 4.0, 0.5))
        return s

    def test_round_trip(self):
        s = self.make()
        back = load_store(save_store(s))
        assert back == s
        assert back.vectors().tobytes() == s.vectors().tobytes()

    def test_empty(self):
        s = DescriptorStore(192, "empty")
        assert load_store(save_store(s)) == s

    def test_corrupted_byte(self):
        blob = bytearray(save_store(self.make()))
        blob[-10] ^= 0x01
        with pytest.raises(StoreChecksumError):
            load_store(bytes(blob))

    def test_version(self):
        blob = bytearray(save_store(self.make()))
        blob[8] = 99
        with pytest.raises(StoreVersionError):
            load_store(bytes(blob))

    def test_truncated(self):
        with pytest.raises(StoreError):
            load_store(save_store(self.make())[:-3])

    def test_dim_enforced(self):
        with pytest.raises(ValueError):
            DescriptorStore(3, "x").add(("a", 0), [1.0, 2.0], (0, 0))
