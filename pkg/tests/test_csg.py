import numpy as np
import pytest

from csgcluster.csg import (
    CrowdedSubGraph,
    build_csg,
    cosine_pair_weights,
    dump_csg,
    row_normalize,
)
from csgcluster.stream_core import Query, RecordStore, Sighting
from csgcluster.trajectory import TrajectoryConfig, TrajectoryParams
from csgcluster.vmf import vmf_sample


def sight(t, x, y):
    return Sighting(t_start=t, t_end=t, cam_pos=np.array([x, y], float), pose=np.array([1.0, 0.0]))


def query_at(t, x, y, features):
    return Query.from_features(sight(t, x, y), np.atleast_2d(features))


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def traj_params(seed=0):
    cfg = TrajectoryConfig(embed_width=16, hidden_width=8, floor_lo=(0, 0), floor_hi=(50, 30))
    return TrajectoryParams.init(cfg, np.random.default_rng(seed))


class TestRowNormalize:
    def test_hand_example(self):
        out = row_normalize(np.array([[2.0, 2.0], [0.0, 4.0]]))
        np.testing.assert_array_equal(out, [[0.5, 0.5], [0.0, 1.0]])

    def test_identity_fixed_point(self):
        eye = np.eye(5)
        np.testing.assert_array_equal(row_normalize(eye), eye)

    def test_zero_row_gets_diagonal_one(self):
        out = row_normalize(np.zeros((3, 3)))
        np.testing.assert_array_equal(out, np.eye(3))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            row_normalize(np.array([[1.0, -0.1], [0.0, 1.0]]))

    def test_random_sparse_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        m = rng.uniform(0, 1, (256, 256))
        m[rng.uniform(0, 1, m.shape) < 0.9] = 0.0
        out = row_normalize(m)
        sums = out.sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)


class TestBuildCsg:
    def test_empty_store_trivial_graph(self):
        store = RecordStore(dim=4)
        q = query_at(0.0, 1.0, 1.0, unit([1, 0, 0, 0]))
        g = build_csg(store, q, traj_params())
        assert g.size == 1
        assert g.isolated
        np.testing.assert_array_equal(g.adjacency, [[1.0]])
        assert g.node_ids == [None]

    def test_missing_store_rejected(self):
        q = query_at(0.0, 1.0, 1.0, unit([1, 0, 0, 0]))
        with pytest.raises(ValueError):
            build_csg(None, q, traj_params())

    def test_identical_features_linked_pair_weight_one(self):
        store = RecordStore(dim=4)
        feats = np.tile(unit([1, 2, 0, 1]), (3, 1))
        store.new_record(query_at(0.0, 5.0, 5.0, feats))
        q = query_at(1.0, 5.0, 5.0, feats.copy())
        g = build_csg(store, q, None, link_all_fallback=True)
        assert g.size == 2
        assert g.weights[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert g.weights[1, 0] == pytest.approx(1.0, abs=1e-12)

    def test_isolated_query_reported(self):
        # zero MLP head scores every pair at exactly 0.5 -> linked; force
        # no-link by biasing the head hard negative instead
        params = traj_params(3)
        params.w2[:] = 0.0
        params.b2[:] = -50.0
        store = RecordStore(dim=4)
        store.new_record(query_at(0.0, 5.0, 5.0, unit([1, 0, 0, 0])))
        q = query_at(1.0, 6.0, 6.0, unit([0, 1, 0, 0]))
        g = build_csg(store, q, params)
        assert g.isolated
        assert g.size == 1

    def test_zero_pattern_matches_link_matrix(self):
        rng = np.random.default_rng(7)
        store = RecordStore(dim=8)
        mu = unit(rng.standard_normal(8))
        for i in range(40):
            feats = vmf_sample(unit(rng.standard_normal(8)), 60.0, 5, rng)
            store.new_record(query_at(float(i), rng.uniform(0, 50), rng.uniform(0, 30), feats))
        q = query_at(41.0, 25.0, 15.0, vmf_sample(mu, 60.0, 3, rng))
        params = traj_params(1)
        g = build_csg(store, q, params, csg_size=64)
        assert not g.isolated
        np.testing.assert_array_equal(g.adjacency > 0, g.linked)
        np.testing.assert_allclose(g.adjacency.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.diag(g.adjacency) > 0)
        assert np.array_equal(g.linked, g.linked.T)

    def test_cos_mode_weights(self):
        store = RecordStore(dim=4)
        store.new_record(query_at(0.0, 5.0, 5.0, unit([1, 0, 0, 0])))
        q = query_at(1.0, 5.0, 5.0, unit([0, 1, 0, 0]))
        g = build_csg(store, q, None, weight_mode="cos", link_all_fallback=True)
        # orthogonal unit features -> (1 + 0)/2
        assert g.weights[0, 1] == pytest.approx(0.5)

    def test_pick_bounded_by_csg_size(self):
        rng = np.random.default_rng(9)
        store = RecordStore(dim=4)
        for i in range(30):
            store.new_record(query_at(float(i), rng.uniform(0, 10), rng.uniform(0, 10),
                                      unit(rng.standard_normal(4))))
        q = query_at(31.0, 5.0, 5.0, unit(rng.standard_normal(4)))
        g = build_csg(store, q, None, csg_size=8, link_all_fallback=True)
        assert g.size == 8

    def test_features_are_unit_mean_directions(self):
        rng = np.random.default_rng(11)
        store = RecordStore(dim=4)
        feats = rng.standard_normal((6, 4))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        store.new_record(query_at(0.0, 5.0, 5.0, feats))
        q = query_at(1.0, 5.0, 5.0, unit(rng.standard_normal(4)))
        g = build_csg(store, q, None, link_all_fallback=True)
        np.testing.assert_allclose(np.linalg.norm(g.features, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(
            g.features[1], unit(store.records[0].cf.linear_sum), atol=1e-12
        )

    def test_unknown_weight_mode_rejected(self):
        store = RecordStore(dim=4)
        q = query_at(0.0, 1.0, 1.0, unit([1, 0, 0, 0]))
        with pytest.raises(ValueError):
            build_csg(store, q, None, weight_mode="euclid", link_all_fallback=True)

    def test_deterministic_and_cache_transparent(self):
        rng = np.random.default_rng(13)
        store = RecordStore(dim=6)
        for i in range(25):
            feats = vmf_sample(unit(rng.standard_normal(6)), 40.0, 4, rng)
            store.new_record(query_at(float(i), rng.uniform(0, 50), rng.uniform(0, 30), feats))
        q = query_at(26.0, 20.0, 10.0, vmf_sample(unit(rng.standard_normal(6)), 40.0, 2, rng))
        params = traj_params(2)
        caches = {}
        g1 = build_csg(store, q, params, csg_size=32, caches=caches)
        g2 = build_csg(store, q, params, csg_size=32, caches=caches)  # warm cache
        g3 = build_csg(store, q, params, csg_size=32)  # no cache
        for a, b in ((g1, g2), (g1, g3)):
            assert a.node_ids == b.node_ids
            np.testing.assert_array_equal(a.linked, b.linked)
            np.testing.assert_array_equal(a.adjacency, b.adjacency)
        assert caches["link"] and caches["weight"] and caches["proj"]

    def test_stale_cache_keys_ignored_after_version_bump(self):
        rng = np.random.default_rng(17)
        store = RecordStore(dim=4)
        r0 = store.new_record(query_at(0.0, 5.0, 5.0, unit(rng.standard_normal(4))))
        store.new_record(query_at(1.0, 6.0, 6.0, unit(rng.standard_normal(4))))
        params = traj_params(4)
        caches = {}
        q = query_at(2.0, 5.5, 5.5, unit(rng.standard_normal(4)))
        build_csg(store, q, params, caches=caches)
        n_proj = len(caches["proj"])
        store.assign(r0.record_id, query_at(3.0, 5.0, 5.0, unit(rng.standard_normal(4))))
        q2 = query_at(4.0, 5.5, 5.5, unit(rng.standard_normal(4)))
        g = build_csg(store, q2, params, caches=caches)
        # new version of r0 got fresh projection/link entries instead of stale hits
        assert len(caches["proj"]) > n_proj
        np.testing.assert_allclose(g.adjacency.sum(axis=1), 1.0, atol=1e-9)


class TestDump:
    def test_dump_round_trips_basic_facts(self):
        store = RecordStore(dim=4)
        store.new_record(query_at(0.0, 5.0, 5.0, unit([1, 0, 0, 0])))
        q = query_at(1.0, 5.0, 5.0, unit([0, 1, 0, 0]))
        g = build_csg(store, q, None, link_all_fallback=True)
        text = dump_csg(g)
        assert text.startswith("csg nodes=2")
        assert "node 0 query" in text
        assert "node 1 record:0" in text
        assert "link 0 1 weight=" in text
