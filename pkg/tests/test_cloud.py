import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import line_records
from oracles import greedy_subsample, two_pass_normalize, voxel_count, voxel_first
from vinelpr.cloud import (
    EmptyCloudError,
    NormalizationParams,
    PointCloud,
    ScanRecord,
    filter_cloud,
    normalize_cloud,
    preprocess,
    quantize_cloud,
    subsample_trajectory,
)

coords = arrays(
    np.float64,
    st.tuples(st.integers(1, 60), st.just(3)),
    elements=st.floats(-100, 100, allow_nan=False, width=64),
)


class TestPointCloud:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan, 1.0]]))

    def test_intensity_length_checked(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)), intensity=np.zeros(2))

    def test_empty_has_shape(self):
        assert PointCloud(np.zeros((0, 3))).points.shape == (0, 3)

    def test_record_pads_planar_pose(self):
        rec = ScanRecord(PointCloud(np.ones((1, 3))), (1.0, 2.0))
        assert rec.pose == (1.0, 2.0, 0.0)

    def test_record_rejects_infinite_pose(self):
        with pytest.raises(ValueError):
            ScanRecord(PointCloud(np.ones((1, 3))), (np.inf, 0.0))

    def test_params_validated(self):
        with pytest.raises(ValueError):
            NormalizationParams(scale_factor=0)


class TestFilter:
    def test_zero_point_removed(self):
        out = filter_cloud(PointCloud(np.array([[0.0, 0, 0], [1, 2, 2]])))
        npt.assert_array_equal(out.points, [[1, 2, 2]])

    def test_range_boundary(self):
        out = filter_cloud(PointCloud(np.array([[61.0, 0, 0], [59, 0, 0], [60, 0, 0]])))
        npt.assert_array_equal(out.points, [[59, 0, 0], [60, 0, 0]])

    def test_zero_kept_when_disabled(self):
        out = filter_cloud(PointCloud(np.zeros((2, 3))), NormalizationParams(drop_zero_points=False))
        assert len(out) == 2

    def test_intensity_in_lockstep(self):
        c = PointCloud(np.array([[0.0, 0, 0], [1, 0, 0], [70, 0, 0]]), intensity=[0.1, 0.2, 0.3])
        npt.assert_array_equal(filter_cloud(c).intensity, [0.2])

    def test_uniform_cube_matches_per_point_predicate(self, rng):
        pts = rng.uniform(-50, 50, size=(1000, 3))
        expected = [p for p in pts if np.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2) <= 60.0]
        npt.assert_array_equal(filter_cloud(PointCloud(pts)).points, np.array(expected))

    def test_empty_result_is_distinct_error(self):
        with pytest.raises(EmptyCloudError):
            filter_cloud(PointCloud(np.array([[100.0, 0, 0]])))


class TestNormalize:
    def test_symmetric(self):
        out = normalize_cloud(PointCloud(np.array([[60.0, 0, 0], [-60, 0, 0]])))
        npt.assert_array_equal(out.points, [[1, 0, 0], [-1, 0, 0]])

    def test_two_point_centroid(self):
        out = normalize_cloud(PointCloud(np.array([[30.0, 0, 0], [60, 0, 0]])))
        npt.assert_array_equal(out.points, [[-0.25, 0, 0], [0.25, 0, 0]])

    def test_matches_two_pass_oracle(self, rng):
        pts = filter_cloud(PointCloud(rng.uniform(-40, 40, size=(500, 3)))).points
        out = normalize_cloud(PointCloud(pts)).points
        npt.assert_allclose(out, two_pass_normalize(pts, 60.0), rtol=1e-12, atol=1e-15)
        assert np.linalg.norm(out.mean(axis=0)) < 1e-9 * 60

    def test_empty_raises(self):
        with pytest.raises(EmptyCloudError):
            normalize_cloud(PointCloud(np.zeros((0, 3))))

    @settings(max_examples=60, deadline=None)
    @given(coords)
    def test_filtered_output_within_two(self, pts):
        try:
            filtered = filter_cloud(PointCloud(pts))
        except EmptyCloudError:
            return
        out = normalize_cloud(filtered).points
        assert np.all(np.abs(out) <= 2.0)

    @settings(max_examples=40, deadline=None)
    @given(coords, st.floats(0.5, 100))
    def test_algebraic_identity(self, pts, scale):
        out = normalize_cloud(PointCloud(pts), NormalizationParams(scale_factor=scale)).points
        npt.assert_array_equal(out, (pts - pts.mean(axis=0)) / scale)


class TestQuantize:
    def test_same_cell_first_wins(self):
        out = quantize_cloud(PointCloud(np.array([[0.001, 0, 0], [0.002, 0, 0]])), 0.01)
        npt.assert_array_equal(out.points, [[0.001, 0, 0]])

    def test_adjacent_cells_kept(self):
        assert len(quantize_cloud(PointCloud(np.array([[0.001, 0, 0], [0.011, 0, 0]])), 0.01)) == 2

    def test_hash_set_oracle(self, rng):
        pts = rng.uniform(-1, 1, size=(10_000, 3))
        out = quantize_cloud(PointCloud(pts), 0.1)
        assert len(out) == voxel_count(pts, 0.1)
        npt.assert_array_equal(out.points, pts[voxel_first(pts, 0.1)])

    def test_negative_coordinates_floor(self):
        out = quantize_cloud(PointCloud(np.array([[-0.001, 0, 0], [0.001, 0, 0]])), 0.01)
        assert len(out) == 2

    def test_rejects_bad_voxel(self):
        with pytest.raises(ValueError):
            quantize_cloud(PointCloud(np.ones((1, 3))), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(coords, st.floats(0.05, 5.0))
    def test_idempotent(self, pts, voxel):
        once = quantize_cloud(PointCloud(pts), voxel)
        assert quantize_cloud(once, voxel) == once
        assert len(once) <= len(pts)


class TestSubsample:
    def test_greedy_walk(self):
        recs = line_records([0, 0.4, 0.6, 1.3])
        assert [r.pose[0] for r in subsample_trajectory(recs, 0.5)] == [0, 0.6, 1.3]

    def test_single_record(self):
        recs = line_records([3.0])
        assert subsample_trajectory(recs, 1.0) == recs

    def test_empty(self):
        assert subsample_trajectory([], 1.0) == []

    def test_oracle_replay_on_line(self):
        xs = [0.25 * i for i in range(200)]
        kept = subsample_trajectory(line_records(xs), 1.0)
        expected = greedy_subsample([(x, 0.0) for x in xs], 1.0)
        assert [r.scan_index for r in kept] == expected
        assert expected == list(range(0, 200, 4))

    def test_ignores_height(self):
        recs = [ScanRecord(PointCloud(np.ones((1, 3))), (0, 0, z), scan_index=i) for i, z in enumerate([0, 5])]
        assert len(subsample_trajectory(recs, 1.0)) == 1

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=2, max_size=40), st.floats(0.1, 10))
    def test_consecutive_kept_spacing(self, xy, d):
        recs = line_records([p[0] for p in xy], [p[1] for p in xy])
        kept = subsample_trajectory(recs, d)
        for a, b in zip(kept, kept[1:]):
            assert np.hypot(*(a.ground_xy - b.ground_xy)) >= d


def test_preprocess_quantizes_in_normalized_units():
    pts = np.array([[1.0, 0, 0], [1.3, 0, 0], [2.0, 0, 0]])
    out = preprocess(PointCloud(pts))
    # normalized x is (-0.0072, -0.0022, 0.0094): the first two share a 0.01 cell
    npt.assert_array_equal(out.points, (pts[[0, 2]] - pts.mean(axis=0)) / 60.0)
    assert len(preprocess(PointCloud(pts), voxel_size=None)) == 3
