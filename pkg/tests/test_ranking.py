import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from oracles import exact_ap, smooth_ap_loops, tsap_loops
from vinelpr.autodiff import Tensor, parameter, pairwise_distances
from vinelpr.ranking import (
    BatchLabels,
    LossConfig,
    NoUsableQueryError,
    mrl_loss,
    normalize_rows,
    sigmoid_relax,
    smooth_ap,
    tsap_loss,
)


def random_labels(n, rng):
    """Positives drawn at random, symmetric, every query with at least one."""
    pos = [set() for _ in range(n)]
    for q in range(n):
        j = int(rng.choice([k for k in range(n) if k != q]))
        pos[q].add(j)
        pos[j].add(q)
    return BatchLabels(pos)


def line_distances(offsets):
    """Distance matrix of points on a line; row 0 is the query."""
    x = np.asarray(offsets, dtype=float)
    return np.abs(x[:, None] - x[None, :])


class TestSigmoid:
    def test_zero(self):
        assert sigmoid_relax(0.0, 0.01) == 0.5

    def test_five_tau(self):
        assert sigmoid_relax(0.05, 0.01) == pytest.approx(1 / (1 + math.exp(-5)), rel=1e-12)

    def test_no_overflow(self):
        assert sigmoid_relax(-1000.0, 0.01) == 0.0
        assert sigmoid_relax(1000.0, 0.01) == 1.0

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            sigmoid_relax(1.0, 0.0)


class TestLabels:
    def test_self_candidate_rejected(self):
        with pytest.raises(ValueError):
            BatchLabels([{0}, set()])

    def test_positive_outside_omega_rejected(self):
        with pytest.raises(ValueError):
            BatchLabels([{1}, set(), set()], [{2}, {0}, {0}])

    def test_default_omega(self):
        lab = BatchLabels([{1}, {0}, set()])
        assert lab.omega[2] == {0, 1}
        assert lab.usable_queries() == [0, 1]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(tau=0)
        with pytest.raises(ValueError):
            LossConfig(mrl_dims=(64, 128), mrl_weights=(1.0,))
        with pytest.raises(ValueError):
            LossConfig(mrl_dims=(128, 64), mrl_weights=(1.0, 1.0))


class TestSmoothAp:
    def test_single_candidate_is_one(self):
        lab = BatchLabels([{1}, {0}])
        assert smooth_ap(0, line_distances([0, 1]), lab) == 1.0

    def test_positive_first(self):
        d = line_distances([0, 1, 2, 3, 4])
        lab = BatchLabels([{1}, set(), set(), set(), set()])
        assert abs(smooth_ap(0, d, lab, tau=0.01) - 1.0) < 1e-3

    def test_positive_last(self):
        d = line_distances([0, 1, 2, 3, 4])
        lab = BatchLabels([{4}, set(), set(), set(), set()])
        assert abs(smooth_ap(0, d, lab, tau=0.01) - 0.25) < 1e-3

    def test_empty_positives(self):
        with pytest.raises(NoUsableQueryError):
            smooth_ap(0, line_distances([0, 1]), BatchLabels([set(), set()]))

    def test_matches_loops(self, rng):
        for _ in range(20):
            n = int(rng.integers(3, 9))
            z = rng.normal(size=(n, 4))
            d = np.linalg.norm(z[:, None] - z[None], axis=2)
            lab = random_labels(n, rng)
            for q in range(n):
                ref = smooth_ap_loops(d[q], lab.positives[q], lab.omega[q], 0.05)
                assert smooth_ap(q, d, lab, 0.05) == pytest.approx(ref, abs=1e-12)

    def test_converges_to_exact(self, rng):
        x = np.sort(rng.choice(np.arange(1, 9), size=6, replace=False)).astype(float)
        rng.shuffle(x)
        d = line_distances(np.concatenate([[0.0], x]))
        pos = [{1, 4}] + [set()] * 6
        lab = BatchLabels(pos)
        exact = exact_ap(d[0], lab.positives[0], lab.omega[0])
        assert abs(smooth_ap(0, d, lab, tau=1 / 100) - exact) < 1e-3

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 10_000))
    def test_in_unit_interval(self, n, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, 3))
        d = np.linalg.norm(z[:, None] - z[None], axis=2)
        lab = random_labels(n, rng)
        for q in range(n):
            ap = smooth_ap(q, d, lab, 0.01)
            assert 0.0 < ap <= 1.0


class TestTsap:
    def test_well_separated_near_zero(self):
        # two tight clusters far apart
        z = np.array([[0.0, 0], [0.001, 0], [1, 0], [1.001, 0]])
        lab = BatchLabels([{1}, {0}, {3}, {2}])
        assert tsap_loss(Tensor(z), lab).item() < 1e-3

    def test_single_query_perfect_is_zero(self):
        z = np.array([[0.0, 0], [1.0, 0]])
        lab = BatchLabels([{1}, set()])
        assert tsap_loss(Tensor(z), lab).item() == 0.0

    def test_matches_direct_transcription(self, rng):
        z = rng.normal(size=(6, 5))
        lab = random_labels(6, rng)
        got = tsap_loss(Tensor(z), lab, 0.01).item()
        ref = tsap_loops(z, lab.positives, lab.omega, 0.01)
        assert abs(got - ref) < 1e-12

    def test_skips_queries_without_positives(self, rng):
        z = rng.normal(size=(4, 3))
        lab = BatchLabels([{1}, {0}, set(), set()])
        ref = tsap_loops(z, lab.positives, lab.omega, 0.1)
        assert tsap_loss(Tensor(z), lab, 0.1).item() == pytest.approx(ref, abs=1e-12)

    def test_no_usable_query(self):
        with pytest.raises(NoUsableQueryError):
            tsap_loss(Tensor(np.zeros((3, 2))), BatchLabels([set()] * 3))

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            tsap_loss(Tensor(np.zeros((3, 2))), BatchLabels([{1}, {0}]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 7), st.integers(0, 10_000))
    def test_permutation_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(n, 4))
        lab = random_labels(n, rng)
        perm = rng.permutation(n)
        a = tsap_loss(Tensor(z), lab, 0.05).item()
        b = tsap_loss(Tensor(z[perm]), lab.permuted(perm), 0.05).item()
        assert abs(a - b) < 1e-12
        assert 0.0 <= a < 1.0


class TestMrl:
    def test_equal_prefixes_sum_to_one_point_seven_five(self, rng):
        # descriptor mass only in the first 64 dims: every prefix normalizes to the same vectors
        z = np.zeros((6, 192))
        z[:, :64] = rng.normal(size=(6, 64))
        lab = random_labels(6, rng)
        out = mrl_loss(Tensor(z), lab)
        single = out.terms[64].item()
        assert out.terms[128].item() == single and out.terms[192].item() == single
        assert out.total.item() == 1.75 * single

    def test_weights_one_zero_zero(self, rng):
        z = rng.normal(size=(6, 192))
        lab = random_labels(6, rng)
        out = mrl_loss(Tensor(z), lab, LossConfig(mrl_weights=(1.0, 0.0, 0.0)))
        ref = tsap_loss(normalize_rows(Tensor(z[:, :64])), lab).item()
        assert abs(out.total.item() - ref) < 1e-12

    def test_compositional_small_dims(self, rng):
        z = rng.normal(size=(6, 4))
        lab = random_labels(6, rng)
        cfg = LossConfig(mrl_dims=(2, 4), mrl_weights=(1.0, 0.5))
        out = mrl_loss(Tensor(z), lab, cfg)

        def prefix(m):
            p = z[:, :m]
            return p / np.linalg.norm(p, axis=1, keepdims=True)

        ref = tsap_loops(prefix(2), lab.positives, lab.omega, 0.01) + 0.5 * tsap_loops(
            prefix(4), lab.positives, lab.omega, 0.01
        )
        assert abs(out.total.item() - ref) < 1e-12
        assert set(out.breakdown()) == {2, 4}

    def test_dim_too_small(self, rng):
        with pytest.raises(ValueError):
            mrl_loss(Tensor(rng.normal(size=(4, 100))), random_labels(4, rng))

    def test_gradient_structure(self, rng):
        z0 = rng.normal(size=(6, 192))
        lab = random_labels(6, rng)
        z = parameter(z0.copy())
        mrl_loss(z, lab, LossConfig(mrl_dims=(64,), mrl_weights=(1.0,))).total.backward()
        assert np.all(z.grad[:, 64:] == 0.0)
        assert np.any(z.grad[:, :64] != 0.0)
        full = parameter(z0.copy())
        mrl_loss(full, lab, LossConfig(tau=0.1)).terms[192].backward()
        assert np.any(full.grad[:, 64:] != 0.0)

    def test_excluded_count(self, rng):
        z = rng.normal(size=(4, 192))
        out = mrl_loss(Tensor(z), BatchLabels([{1}, {0}, set(), set()]))
        assert out.excluded_queries == 2


def test_pairwise_distance_matrix_symmetric(rng):
    d = pairwise_distances(Tensor(rng.normal(size=(5, 3)))).data
    npt.assert_array_equal(d, d.T)
    assert np.all(np.diag(d) == 0)


def test_exact_ap_oracle_itself():
    assert exact_ap([0, 1, 2, 3], {3}, {1, 2, 3}) == pytest.approx(1 / 3)
    assert exact_ap([0, 1, 2, 3], {1, 3}, {1, 2, 3}) == pytest.approx((1 + 2 / 3) / 2)
