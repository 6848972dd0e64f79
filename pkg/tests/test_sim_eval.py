"""Simulator realism guarantees, BCubed scoring, and corpus building."""

import math

import numpy as np
import pytest

from csgcluster.sim_eval import (
    Camera,
    CorpusConfig,
    GroceryScenario,
    LabeledStream,
    bcubed,
    bcubed_brute,
    build_training_corpora,
    camera_grid,
    early_split_fixture,
    simulate,
)
from csgcluster.stream_core import time_space_distance


@pytest.fixture(scope="module")
def stream():
    return simulate(GroceryScenario(
        n_identities=10, feature_dim=16, kappa=60.0, duration=900.0,
        sightings_range=(4, 9), snapshots_range=(1, 3), seed=5,
    ))


class TestScenarioValidation:
    @pytest.mark.parametrize("field,value", [
        ("n_identities", 0), ("feature_dim", 1), ("kappa", -1.0),
        ("duration", 10.0), ("sightings_range", (0, 4)),
        ("snapshots_range", (3, 1)), ("walk_speed_frac", (0.5, 1.2)),
        ("archetypes", -1), ("archetype_spread", -0.5),
    ])
    def test_bad_values_rejected(self, field, value):
        with pytest.raises(ValueError):
            GroceryScenario(**{field: value})

    def test_camera_grid_covers_floor(self):
        cams = camera_grid((50.0, 30.0), spacing=10.0, radius=7.5)
        xs = np.linspace(0.0, 50.0, 26)
        ys = np.linspace(0.0, 30.0, 16)
        for x in xs:
            for y in ys:
                assert any(np.hypot(*(c.pos - (x, y))) <= c.radius for c in cams)


class TestSimulate:
    def test_same_seed_same_stream(self):
        sc = GroceryScenario(n_identities=5, feature_dim=8, duration=400.0,
                             sightings_range=(3, 5), seed=9)
        a, b = simulate(sc), simulate(sc)
        assert len(a) == len(b)
        for qa, qb in zip(a.events, b.events):
            assert qa.sighting.t_tilde == qb.sighting.t_tilde
            assert np.array_equal(qa.cf.linear_sum, qb.cf.linear_sum)

    def test_different_seed_differs(self):
        base = dict(n_identities=5, feature_dim=8, duration=400.0,
                    sightings_range=(3, 5))
        a = simulate(GroceryScenario(seed=1, **base))
        b = simulate(GroceryScenario(seed=2, **base))
        assert not np.array_equal(a.events[0].cf.linear_sum, b.events[0].cf.linear_sum)

    def test_every_identity_appears(self, stream):
        assert set(stream.labels) == set(range(10))

    def test_events_time_ordered(self, stream):
        times = [q.sighting.t_tilde for q in stream.events]
        assert times == sorted(times)

    def test_consecutive_sightings_gate_reachable(self, stream):
        """An identity's next sighting must stay inside the time-space
        cone of its previous one, else the pick stage could not find
        the record that just absorbed it."""
        speed = GroceryScenario().speed
        by_ident = {}
        for q, lab in zip(stream.events, stream.labels):
            by_ident.setdefault(lab, []).append(q.sighting)
        for sights in by_ident.values():
            for a, b in zip(sights, sights[1:]):
                gap = abs(b.t_tilde - a.t_tilde)
                reach = float(np.linalg.norm(b.cam_pos - a.cam_pos)) / speed
                assert reach <= gap + 1e-9

    def test_snapshots_range_respected(self, stream):
        counts = {q.cf.count for q in stream.events}
        assert counts <= {1, 2, 3}

    def test_features_unit_norm(self, stream):
        for q in stream.events[:50]:
            norms = np.linalg.norm(q.raw_features, axis=1)
            assert np.allclose(norms, 1.0, atol=1e-9)


class TestArchetypes:
    def test_twins_share_direction_strangers_do_not(self):
        sc = GroceryScenario(
            n_identities=8, feature_dim=32, kappa=500.0, duration=600.0,
            sightings_range=(6, 8), snapshots_range=(2, 4),
            archetypes=4, archetype_spread=0.05, seed=3,
        )
        stream = simulate(sc)
        mus = {}
        for q, lab in zip(stream.events, stream.labels):
            mus.setdefault(lab, []).append(q.cf.linear_sum)
        mean_dir = {
            lab: np.sum(v, axis=0) / np.linalg.norm(np.sum(v, axis=0))
            for lab, v in mus.items()
        }
        # identity i and i+4 share archetype i; cross-archetype pairs are
        # nearly orthogonal at dim 32
        for i in range(4):
            assert float(mean_dir[i] @ mean_dir[i + 4]) > 0.8
        for i in range(4):
            for j in range(4):
                if i != j:
                    assert float(mean_dir[i] @ mean_dir[j]) < 0.5

    def test_spread_zero_makes_identical_twins(self):
        sc = GroceryScenario(
            n_identities=4, feature_dim=16, kappa=1e6, duration=400.0,
            sightings_range=(3, 4), archetypes=2, archetype_spread=0.0, seed=1,
        )
        stream = simulate(sc)
        dirs = {}
        for q, lab in zip(stream.events, stream.labels):
            dirs.setdefault(lab, q.cf.linear_sum / np.linalg.norm(q.cf.linear_sum))
        assert float(dirs[0] @ dirs[2]) == pytest.approx(1.0, abs=1e-4)


class TestBCubed:
    def test_hand_fixture_exact(self):
        p, r, f = bcubed([1, 1, 1], [1, 1, 2])
        assert p == pytest.approx(5.0 / 9.0, abs=1e-12)
        assert r == 1.0
        assert f == pytest.approx(5.0 / 7.0, abs=1e-12)

    def test_perfect_clustering(self):
        p, r, f = bcubed([4, 7, 4, 9], [0, 1, 0, 2])
        assert (p, r, f) == (1.0, 1.0, 1.0)

    def test_matches_brute_force_on_random_labelings(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = int(rng.integers(2, 60))
            true = rng.integers(0, 6, size=n).tolist()
            pred = rng.integers(0, 6, size=n).tolist()
            assert bcubed(pred, true) == pytest.approx(bcubed_brute(pred, true), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bcubed([1, 2], [1])


class TestCorpus:
    def test_validation(self):
        with pytest.raises(ValueError):
            CorpusConfig(val_fraction=1.0)
        with pytest.raises(ValueError):
            CorpusConfig(fragment_every=0)
        with pytest.raises(ValueError):
            CorpusConfig(weight_modes=("euclid",))

    def test_split_is_disjoint_and_pairs_balanced(self, stream):
        cfg = CorpusConfig(seed=2, pairs_per_identity=6, weight_modes=())
        corpora = build_training_corpora(stream, cfg)
        assert not set(corpora.train_identities) & set(corpora.val_identities)
        labels = [lab for _, _, lab in corpora.traj_train]
        assert 0.3 <= sum(labels) / len(labels) <= 0.7

    def test_graphs_have_query_node_and_normalized_rows(self, stream):
        cfg = CorpusConfig(seed=2, pairs_per_identity=6, graph_stride=2, csg_size=16)
        corpora = build_training_corpora(stream, cfg)
        graphs = corpora.graphs_train["vmf"]
        assert graphs
        for feats, adj, labels in graphs[:10]:
            assert feats.shape[0] == adj.shape[0] == adj.shape[1] == labels.shape[0]
            assert feats.shape[0] >= cfg.min_graph_nodes
            sums = adj.sum(axis=1)
            nonzero = sums > 0
            assert np.allclose(sums[nonzero], 1.0, atol=1e-9)
            assert np.allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-9)

    def test_fragmentation_creates_same_label_record_pairs(self, stream):
        cfg = CorpusConfig(seed=2, pairs_per_identity=6, graph_stride=1,
                           csg_size=16, fragment_every=2)
        corpora = build_training_corpora(stream, cfg)
        found = False
        for _, _, labels in corpora.graphs_train["cos"]:
            rec_labels = labels[1:]
            if len(rec_labels) != len(set(rec_labels.tolist())):
                found = True
                break
        assert found, "no graph carries two records of one identity"


class TestEarlySplitFixture:
    def test_fixture_configs_differ_only_in_merge_pass(self):
        stream, without, with_merge = early_split_fixture(seed=4)
        assert len(stream.events) == len(stream.labels)
        assert without.mode == "ts"
        assert with_merge.mode == "ts-m"
        assert without.xi_assign == with_merge.xi_assign
        assert without.csg_size == with_merge.csg_size
        # single-snapshot queries are the whole point of the fixture
        assert all(q.cf.count == 1 for q in stream.events)
