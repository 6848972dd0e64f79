"""Config loading rules and the subcommand pipeline end to end."""

import json
import subprocess
import sys

import pytest
import yaml

from csgcluster.cli import load_config, main

MINI_CONFIG = {
    "scenario": {
        "n_identities": 8,
        "feature_dim": 16,
        "kappa": 120.0,
        "duration": 700.0,
        "sightings_range": [6, 10],
        "snapshots_range": [2, 4],
    },
    "engine": {
        "mode": "ts-m",
        "xi_assign": 0.45,
        "xi_merge": 0.35,
        "csg_size": 24,
    },
    "trajectory": {
        "embed_width": 16,
        "hidden_width": 16,
        "epochs": 4,
        "batch_size": 16,
    },
    "gcn": {
        "layer_dims": [32, 16, 8],
        "max_epochs": 5,
        "patience": 3,
    },
    "corpus": {
        "pairs_per_identity": 8,
        "graph_stride": 2,
        "csg_size": 12,
    },
    "modes": ["baseline", "ts", "ts-m"],
    "seed": 3,
}


class TestLoadConfig:
    def test_empty_file_gives_paper_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        cfg = load_config(path)
        assert cfg.engine.xi_assign == 0.91
        assert cfg.engine.xi_merge == 0.88
        assert cfg.engine.csg_size == 256
        assert cfg.gcn.layer_dims == (256, 128, 64)
        assert cfg.gcn.learning_rate == 0.01
        assert cfg.gcn.max_epochs == 120
        assert cfg.gcn.patience == 10
        assert cfg.trajectory.epochs == 80
        assert cfg.trajectory.batch_size == 64
        assert cfg.trajectory.learning_rate == 0.01
        assert cfg.seed == 0

    def test_no_file_gives_defaults(self):
        assert load_config(None).engine.xi_assign == 0.91

    def test_xi_assign_round_trips(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("engine:\n  xi_assign: 0.91\n")
        assert load_config(path).engine.xi_assign == 0.91

    def test_unknown_top_key_named(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("turbo: 1\n")
        with pytest.raises(ValueError, match="unknown config key turbo"):
            load_config(path)

    def test_unknown_section_key_named(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("engine:\n  bogus: 3\n")
        with pytest.raises(ValueError, match="unknown config key engine.bogus"):
            load_config(path)

    def test_negative_csg_size_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("engine:\n  csg_size: -4\n")
        with pytest.raises(ValueError, match="csg_size"):
            load_config(path)

    def test_scenario_seed_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("scenario:\n  seed: 5\n")
        with pytest.raises(ValueError, match="scenario.seed"):
            load_config(path)

    def test_unknown_mode_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("modes: [baseline, warp]\n")
        with pytest.raises(ValueError, match="warp"):
            load_config(path)

    def test_seed_flag_wins_over_file(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("seed: 11\n")
        assert load_config(path).seed == 11
        assert load_config(path, seed=42).seed == 42

    def test_missing_events_path_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("events_path: /nonexistent/events.jsonl\n")
        with pytest.raises(ValueError, match="missing path"):
            load_config(path)

    def test_lists_coerce_to_tuple_fields(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("scenario:\n  sightings_range: [4, 9]\n")
        assert load_config(path).scenario.sightings_range == (4, 9)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> train-trajectory -> train-gcn once; tests share the files."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(MINI_CONFIG))
    events = root / "events.jsonl"
    traj_model = root / "traj.model"
    full_model = root / "full.model"
    assert main(["simulate", "--config", str(cfg_path), "--out", str(events)]) == 0
    assert main([
        "train-trajectory", "--config", str(cfg_path),
        "--events", str(events), "--out", str(traj_model),
    ]) == 0
    assert main([
        "train-gcn", "--config", str(cfg_path), "--events", str(events),
        "--model", str(traj_model), "--out", str(full_model),
    ]) == 0
    return {"root": root, "config": cfg_path, "events": events,
            "traj": traj_model, "full": full_model}


class TestPipeline:
    def test_simulate_writes_labeled_jsonl(self, pipeline):
        lines = pipeline["events"].read_text().strip().splitlines()
        assert len(lines) >= 8 * 6
        first = json.loads(lines[0])
        assert {"t_start", "t_end", "camera_id", "cam_x", "cam_y",
                "pose_angle_rad", "features", "label"} <= set(first)

    def test_simulate_same_seed_byte_identical(self, pipeline):
        again = pipeline["root"] / "events2.jsonl"
        assert main(["simulate", "--config", str(pipeline["config"]),
                     "--out", str(again)]) == 0
        assert again.read_bytes() == pipeline["events"].read_bytes()

    def test_stream_and_evaluate(self, pipeline, capsys):
        decisions = pipeline["root"] / "decisions.jsonl"
        timing = pipeline["root"] / "timing.json"
        rc = main([
            "stream", "--config", str(pipeline["config"]),
            "--events", str(pipeline["events"]), "--model", str(pipeline["full"]),
            "--out", str(decisions), "--timing-out", str(timing),
        ])
        assert rc == 0
        rows = [json.loads(s) for s in decisions.read_text().strip().splitlines()]
        assert {r["kind"] for r in rows} <= {"assigned", "new"}
        assert json.loads(timing.read_text())["n_queries"] == len(rows)

        rc = main([
            "evaluate", "--config", str(pipeline["config"]),
            "--events", str(pipeline["events"]), "--decisions", str(decisions),
            "--out", "-",
        ])
        assert rc == 0
        scored = json.loads(capsys.readouterr().out)
        assert 0.0 <= scored["f1_pct"] <= 100.0
        assert scored["n_queries"] == len(rows)

    def test_stream_snapshot_round_trips(self, pipeline):
        from csgcluster.persist import load_store
        decisions = pipeline["root"] / "d2.jsonl"
        snap = pipeline["root"] / "store.bin"
        rc = main([
            "stream", "--config", str(pipeline["config"]),
            "--events", str(pipeline["events"]), "--model", str(pipeline["full"]),
            "--out", str(decisions), "--store-out", str(snap),
        ])
        assert rc == 0
        store = load_store(snap)
        finals = {json.loads(s)["final_id"] for s in decisions.read_text().strip().splitlines()}
        assert finals <= set(store.records)

    def test_ablate_runs_all_modes_deterministically(self, pipeline):
        out_a = pipeline["root"] / "table_a.txt"
        out_b = pipeline["root"] / "table_b.txt"
        for out in (out_a, out_b):
            rc = main([
                "ablate", "--config", str(pipeline["config"]),
                "--events", str(pipeline["events"]), "--model", str(pipeline["full"]),
                "--out", str(out), "--timing-out", str(out) + ".timing",
            ])
            assert rc == 0
        assert out_a.read_bytes() == out_b.read_bytes()
        body = out_a.read_text()
        for label in ("Baseline", "TS", "TS-M"):
            assert label in body

    def test_train_gcn_without_trajectory_fails(self, pipeline):
        from csgcluster.engine import ModelBundle
        from csgcluster.persist import save_model
        empty = pipeline["root"] / "empty.model"
        save_model(empty, ModelBundle())
        rc = main([
            "train-gcn", "--config", str(pipeline["config"]),
            "--events", str(pipeline["events"]),
            "--model", str(empty), "--out", str(pipeline["root"] / "x.model"),
        ])
        assert rc == 1

    def test_missing_required_flag_fails_cleanly(self, pipeline):
        assert main(["stream", "--config", str(pipeline["config"])]) == 1

    def test_console_entry_point(self, pipeline):
        proc = subprocess.run(
            [sys.executable, "-m", "csgcluster.cli", "simulate",
             "--config", str(pipeline["config"]),
             "--out", str(pipeline["root"] / "sub.jsonl")],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
        assert "simulated" in proc.stderr
