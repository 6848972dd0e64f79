import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csgcluster.stream_core import (
    DEFAULT_SPEED_MPS,
    CFVector,
    DegenerateMeanError,
    Query,
    RecordStore,
    Sighting,
    cf_from_features,
    cf_mean,
    cf_mean_direction,
    cf_merge,
    cf_radius,
    time_space_distance,
)


def make_query(t_start, t_end, x, y, feat_dim=4, rng=None, pose=(1.0, 0.0), features=None):
    if features is None:
        rng = rng or np.random.default_rng(0)
        features = rng.standard_normal((1, feat_dim))
        features /= np.linalg.norm(features, axis=1, keepdims=True)
    return Query.from_features(
        Sighting(t_start=t_start, t_end=t_end, cam_pos=np.array([x, y]), pose=np.array(pose)),
        features,
    )


class TestClusterFeatures:
    def test_hand_example(self):
        cf = cf_from_features(np.array([[1.0, 1.0], [1.0, 3.0]]))
        assert cf.count == 2
        assert np.array_equal(cf.linear_sum, [2.0, 4.0])
        assert np.array_equal(cf.square_sum, [2.0, 10.0])
        assert np.array_equal(cf_mean(cf), [1.0, 2.0])
        assert np.array_equal(cf_radius(cf), [0.0, 1.0])

    def test_hand_example_prebuilt(self):
        cf = CFVector(count=4, linear_sum=np.array([4.0, 0.0]), square_sum=np.array([4.0, 4.0]))
        assert np.array_equal(cf_mean(cf), [1.0, 0.0])
        assert np.array_equal(cf_radius(cf), [0.0, 1.0])

    def test_merge_is_commutative(self):
        rng = np.random.default_rng(1)
        a = cf_from_features(rng.standard_normal((5, 8)))
        b = cf_from_features(rng.standard_normal((3, 8)))
        ab = cf_merge(a, b)
        ba = cf_merge(b, a)
        assert np.array_equal(ab.linear_sum, ba.linear_sum)
        assert np.array_equal(ab.square_sum, ba.square_sum)
        assert ab.count == ba.count

    @given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(1, 6))
    @settings(max_examples=40, deadline=None)
    def test_split_merge_matches_direct(self, seed, n, d):
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((n, d))
        cut = int(rng.integers(1, n)) if n > 1 else 1
        direct = cf_from_features(feats)
        if n == 1:
            merged = cf_from_features(feats)
        else:
            merged = cf_merge(cf_from_features(feats[:cut]), cf_from_features(feats[cut:]))
        assert merged.count == direct.count
        np.testing.assert_allclose(merged.linear_sum, direct.linear_sum, rtol=0, atol=1e-9)
        np.testing.assert_allclose(merged.square_sum, direct.square_sum, rtol=0, atol=1e-9)

    def test_radius_nonnegative_for_constant_features(self):
        feats = np.tile(np.array([[0.3, -0.7, 0.1]]), (50, 1))
        cf = cf_from_features(feats)
        r = cf_radius(cf)
        assert np.all(r >= 0.0)
        assert np.all(r <= 1e-7)

    def test_radius_clamps_negative_variance(self):
        # rounding can push SS/K below mean^2; the radius must clamp to 0
        cf = CFVector(count=2, linear_sum=np.array([2.0]), square_sum=np.array([2.0 - 1e-12]))
        assert np.array_equal(cf_radius(cf), [0.0])

    def test_mean_direction_degenerate(self):
        cf = cf_from_features(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        with pytest.raises(DegenerateMeanError):
            cf_mean_direction(cf)

    def test_dimension_mismatch(self):
        a = cf_from_features(np.ones((1, 3)))
        b = cf_from_features(np.ones((1, 4)))
        with pytest.raises(ValueError):
            cf_merge(a, b)


class TestTimeSpaceDistance:
    def test_min_over_sightings(self):
        s = DEFAULT_SPEED_MPS
        store = RecordStore(dim=4)
        # first sighting: floor distance 4s metres, dt~ = 3  ->  sqrt(16+9) = 5
        q0 = make_query(0.0, 0.0, 0.0, 0.0)
        rec = store.new_record(q0)
        store.assign(rec.record_id, make_query(5.0, 5.0, 4.0 * s, 0.0))
        # query at t~ = 12, at the second sighting's spot: dists 5.0 and 2.0
        q = make_query(6.0, 7.0, 0.0, 0.0)
        # sighting 1: E=0, dt~=13 -> 13 ; sighting 2: E=4s, dt~=3 -> 5
        assert time_space_distance(store.records[rec.record_id], q) == pytest.approx(5.0)
        q2 = make_query(4.0, 8.0, 4.0 * s, 0.0)
        # sighting 1: E=4s, dt~=12 -> sqrt(16+144); sighting 2: E=0, dt~=2 -> 2
        assert time_space_distance(store.records[rec.record_id], q2) == pytest.approx(2.0)

    def test_sighting_time_order_validated(self):
        with pytest.raises(ValueError):
            Sighting(t_start=2.0, t_end=1.0, cam_pos=np.zeros(2), pose=np.array([1.0, 0.0]))


def brute_force_pick(store, query, k):
    dists = []
    for rid, rec in store.records.items():
        dists.append((time_space_distance(rec, query, store.speed), rid))
    dists.sort()
    return dists[:k]


class TestRecordStore:
    def test_empty_pick(self):
        store = RecordStore(dim=4)
        assert store.pick_nearest(make_query(0, 0, 0, 0), 5) == []

    def test_pick_matches_brute_force(self):
        rng = np.random.default_rng(7)
        store = RecordStore(dim=4, cell_seconds=9.0)
        for i in range(250):
            t = float(rng.uniform(0, 2000))
            q = make_query(t, t + rng.uniform(0, 3), rng.uniform(0, 60), rng.uniform(0, 40), rng=rng)
            if store.records and rng.random() < 0.5:
                rid = int(rng.choice(list(store.records)))
                store.assign(rid, q)
            else:
                store.new_record(q)
        for trial in range(40):
            t = float(rng.uniform(-50, 2100))
            q = make_query(t, t + 1, rng.uniform(-5, 70), rng.uniform(-5, 45), rng=rng)
            for k in (1, 7, 64, 500):
                got = store.pick_nearest(q, k)
                want = brute_force_pick(store, q, k)
                assert [r for _, r in got] == [r for _, r in want]
                np.testing.assert_allclose(
                    [dv for dv, _ in got], [dv for dv, _ in want], rtol=0, atol=0
                )

    def test_pick_tie_broken_by_lower_id(self):
        store = RecordStore(dim=2)
        qa = make_query(0.0, 0.0, 0.0, 0.0, feat_dim=2)
        qb = make_query(0.0, 0.0, 0.0, 0.0, feat_dim=2)
        store.new_record(qa)
        store.new_record(qb)
        got = store.pick_nearest(make_query(1.0, 1.0, 0.0, 0.0, feat_dim=2), 2)
        assert [r for _, r in got] == [0, 1]

    def test_records_within_is_exact(self):
        rng = np.random.default_rng(3)
        store = RecordStore(dim=4, cell_seconds=11.0)
        for _ in range(120):
            t = float(rng.uniform(0, 500))
            store.new_record(make_query(t, t, rng.uniform(0, 30), rng.uniform(0, 30), rng=rng))
        q = make_query(250.0, 251.0, 15.0, 15.0, rng=rng)
        for radius in (5.0, 40.0, 300.0):
            got = store.records_within(q, radius)
            want = [(dv, r) for dv, r in brute_force_pick(store, q, len(store.records)) if dv <= radius]
            assert got == want

    def test_window_truncation_keeps_cf_complete(self):
        store = RecordStore(dim=4, window=32)
        rec = store.new_record(make_query(0.0, 0.0, 0.0, 0.0))
        for i in range(1, 40):
            store.assign(rec.record_id, make_query(float(i), float(i), 1.0, 1.0))
        rec = store.records[rec.record_id]
        assert len(rec.sightings) == 32
        assert rec.n_sightings_total == 40
        assert rec.cf.count == 40
        # kept sightings are the most recent ones
        assert rec.sightings[0].t_start == 8.0

    def test_merge_tombstones_and_chain_resolution(self):
        store = RecordStore(dim=4)
        r0 = store.new_record(make_query(0.0, 0.0, 0.0, 0.0)).record_id
        r1 = store.new_record(make_query(1.0, 1.0, 5.0, 5.0)).record_id
        r2 = store.new_record(make_query(2.0, 2.0, 9.0, 9.0)).record_id
        c0 = store.records[r0].cf.count
        store.merge_into(r1, r2)
        store.merge_into(r0, r1)
        assert store.resolve(r2) == r0
        assert store.resolve(r1) == r0
        assert store.resolve(r0) == r0
        assert set(store.records) == {r0}
        assert store.records[r0].cf.count == 3 * c0
        assert store.records[r0].n_sightings_total == 3

    def test_merged_record_disappears_from_pick(self):
        store = RecordStore(dim=4)
        r0 = store.new_record(make_query(0.0, 0.0, 0.0, 0.0)).record_id
        r1 = store.new_record(make_query(0.5, 0.5, 1.0, 1.0)).record_id
        store.merge_into(r0, r1)
        got = store.pick_nearest(make_query(1.0, 1.0, 0.0, 0.0), 10)
        assert [r for _, r in got] == [r0]

    def test_dim_validation(self):
        store = RecordStore(dim=8)
        with pytest.raises(ValueError):
            store.new_record(make_query(0.0, 0.0, 0.0, 0.0, feat_dim=4))

    def test_self_merge_rejected(self):
        store = RecordStore(dim=4)
        rid = store.new_record(make_query(0.0, 0.0, 0.0, 0.0)).record_id
        with pytest.raises(ValueError):
            store.merge_into(rid, rid)
