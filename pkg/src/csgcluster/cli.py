"""Command-line front end: one binary, six subcommands.

    simulate          generate a labeled synthetic stream (JSON lines)
    train-trajectory  fit the track-link predictor from a labeled stream
    train-gcn         fit the graph embeddings on top of a link model
    stream            run the clustering engine over an event file
    evaluate          score a decision log against stream labels
    ablate            run and score every configured mode on one stream

All knobs live in one YAML file (--config); --seed overrides the run
seed and --out names the main output. Data outputs are deterministic
given (config, seed, inputs); wall-clock measurements go to a separate
timing file so repeated runs stay byte-identical. Diagnostics go to
stderr, controlled by the CSGCLUSTER_LOG environment variable (debug,
info, warning, error; default info).
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace

import yaml

from .engine import MODE_LABELS, MODES, EngineConfig, ModelBundle, run_stream
from .gcn import GcnConfig
from .persist import (
    config_fingerprint,
    load_model,
    read_events,
    save_model,
    save_store,
    write_events,
)
from .sim_eval import (
    CorpusConfig,
    GroceryScenario,
    LabeledStream,
    bcubed,
    build_training_corpora,
    format_rows,
    resolve_final_ids,
    simulate,
)
from .trajectory import TrajectoryConfig, train_trajectory
from .gcn import train_gcn

log = logging.getLogger("csgcluster")

_SECTIONS = {
    "engine": EngineConfig,
    "scenario": GroceryScenario,
    "trajectory": TrajectoryConfig,
    "gcn": GcnConfig,
    "corpus": CorpusConfig,
}
_TOP_KEYS = set(_SECTIONS) | {"modes", "seed", "events_path", "model_path", "out_path"}


@dataclass
class RunConfig:
    """Everything a subcommand needs, resolved against the defaults."""

    engine: EngineConfig = field(default_factory=EngineConfig)
    scenario: GroceryScenario = field(default_factory=GroceryScenario)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    gcn: GcnConfig = field(default_factory=GcnConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    modes: list = field(default_factory=lambda: list(MODES))
    seed: int = 0
    events_path: str = None
    model_path: str = None
    out_path: str = None

    def fingerprint_source(self):
        """JSON-friendly view of the training-relevant settings."""
        out = {}
        for name in ("engine", "scenario", "trajectory", "gcn", "corpus"):
            sec = dataclasses.asdict(getattr(self, name))
            sec.pop("cameras", None)  # derived from floor/spacing
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        out["seed"] = self.seed
        return out


def _build_section(name, cls, data):
    if not isinstance(data, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {name}.{key}")
        if name == "scenario" and key in ("seed", "cameras"):
            raise ValueError(
                f"config key {name}.{key} is managed by the run: "
                "set the top-level seed instead"
            )
        default = known[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config section {name!r}: {exc}") from None


def load_config(path=None, seed=None):
    """Read a YAML run config; every omitted key keeps its default.

    Unknown keys are rejected by name. Input paths named by the config
    must exist. A seed argument (the --seed flag) wins over the file.
    """
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ValueError(f"unknown config key {sorted(unknown)[0]}")
    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _build_section(name, cls, raw[name]))
    if "modes" in raw:
        modes = raw["modes"]
        if not isinstance(modes, list) or not modes:
            raise ValueError("config key modes must be a non-empty list")
        for m in modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r} in config key modes")
        cfg.modes = list(modes)
    if "seed" in raw:
        cfg.seed = int(raw["seed"])
    for key in ("events_path", "model_path", "out_path"):
        if raw.get(key) is not None:
            setattr(cfg, key, str(raw[key]))
    if seed is not None:
        cfg.seed = int(seed)
    for key in ("events_path", "model_path"):
        p = getattr(cfg, key)
        if p is not None and not os.path.exists(p):
            raise ValueError(f"config key {key} names a missing path: {p}")
    return cfg


def preset_path(name):
    """Filesystem path of a packaged preset config."""
    here = os.path.dirname(os.path.abspath(__file__))
    path = os.path.join(here, "presets", f"{name}.yaml")
    if not os.path.exists(path):
        raise ValueError(f"no preset named {name!r}")
    return path


# ---------------------------------------------------------------------------
# Subcommand helpers
# ---------------------------------------------------------------------------


def _require(value, flag, what):
    if value is None:
        raise ValueError(f"{what} needed: pass {flag} or set it in the config")
    return value


def _read_labeled(path, need_labels):
    events, labels = read_events(path)
    if need_labels and (labels is None or any(lab is None for lab in labels)):
        raise ValueError(f"{path}: every event needs a label for this command")
    return events, labels


def _load_bundle(cfg, path):
    return load_model(path, config=cfg.fingerprint_source(), expect_dim=None)


def _write_text(path, text):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _decision_obj(decision, final_id):
    return {
        "query_index": decision.query_index,
        "kind": decision.kind,
        "target_record": decision.target_record,
        "final_id": final_id,
        "min_distance": decision.min_distance,
        "n_candidates": decision.n_candidates,
        "merges": [[int(a), int(b), float(d)] for a, b, d in decision.merges],
    }


def _cmd_simulate(cfg, args):
    scenario = replace(cfg.scenario, seed=cfg.seed)
    stream = simulate(scenario)
    out = _require(args.out or cfg.out_path, "--out", "an output path")
    write_events(out, stream.events, stream.labels)
    log.info("simulated %d events for %d identities -> %s",
             len(stream), scenario.n_identities, out)
    return 0


def _cmd_train_trajectory(cfg, args):
    events_path = _require(args.events or cfg.events_path, "--events", "a labeled event file")
    out = _require(args.out or cfg.out_path, "--out", "an output path")
    events, labels = _read_labeled(events_path, need_labels=True)
    stream = LabeledStream(events=events, labels=labels)
    corpus_cfg = replace(cfg.corpus, seed=cfg.seed, weight_modes=())
    corpora = build_training_corpora(stream, corpus_cfg)
    params, history = train_trajectory(corpora.traj_train, cfg.trajectory, seed=cfg.seed)
    log.info("trajectory trained on %d pairs (final loss %.4f)",
             len(corpora.traj_train), history[-1] if history else float("nan"))
    save_model(out, ModelBundle(trajectory=params), config=cfg.fingerprint_source())
    return 0


def _cmd_train_gcn(cfg, args):
    events_path = _require(args.events or cfg.events_path, "--events", "a labeled event file")
    model_path = _require(args.model or cfg.model_path, "--model", "a trajectory model file")
    out = _require(args.out or cfg.out_path, "--out", "an output path")
    events, labels = _read_labeled(events_path, need_labels=True)
    stream = LabeledStream(events=events, labels=labels)
    bundle = _load_bundle(cfg, model_path)
    if bundle.trajectory is None:
        raise ValueError(f"{model_path} holds no trajectory section; train it first")
    corpus_cfg = replace(cfg.corpus, seed=cfg.seed, traj_params=bundle.trajectory)
    corpora = build_training_corpora(stream, corpus_cfg)
    for mode in corpus_cfg.weight_modes:
        params, history = train_gcn(
            corpora.graphs_train[mode],
            cfg.gcn,
            seed=cfg.seed,
            val_corpus=corpora.graphs_val[mode] or None,
        )
        log.info("gcn[%s] trained on %d graphs, %d epochs",
                 mode, len(corpora.graphs_train[mode]), len(history))
        if mode == "cos":
            bundle.gcn_cos = params
        else:
            bundle.gcn_vmf = params
    save_model(out, bundle, config=cfg.fingerprint_source())
    return 0


def _stream_once(cfg, events, bundle, mode=None):
    engine_cfg = cfg.engine if mode is None else replace(cfg.engine, mode=mode)
    return run_stream(events, models=bundle, config=engine_cfg)


def _cmd_stream(cfg, args):
    events_path = _require(args.events or cfg.events_path, "--events", "an event file")
    out = _require(args.out or cfg.out_path, "--out", "an output path")
    events, _labels = read_events(events_path)
    bundle = ModelBundle()
    model_path = args.model or cfg.model_path
    if model_path is not None:
        bundle = _load_bundle(cfg, model_path)
    decisions, store, timing = _stream_once(cfg, events, bundle)
    finals = resolve_final_ids(decisions, store)
    lines = [json.dumps(_decision_obj(d, f), sort_keys=True) for d, f in zip(decisions, finals)]
    _write_text(out, "".join(line + "\n" for line in lines))
    if args.store_out:
        save_store(args.store_out, store)
    if args.timing_out:
        with open(args.timing_out, "w", encoding="utf-8") as fh:
            json.dump(timing, fh, indent=2)
    log.info("streamed %d queries -> %d records (%.2f s per thousand)",
             len(events), len(store.records) if store else 0, timing["s_ptq"])
    return 0


def _cmd_evaluate(cfg, args):
    events_path = _require(args.events or cfg.events_path, "--events", "a labeled event file")
    decisions_path = _require(args.decisions, "--decisions", "a decision log")
    _events, labels = _read_labeled(events_path, need_labels=True)
    finals = []
    with open(decisions_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                finals.append(json.loads(line)["final_id"])
    if len(finals) != len(labels):
        raise ValueError(
            f"{len(finals)} decisions in {decisions_path} but {len(labels)} labeled events"
        )
    p, r, f1 = bcubed(finals, labels)
    row = {
        "precision_pct": round(100.0 * p, 2),
        "recall_pct": round(100.0 * r, 2),
        "f1_pct": round(100.0 * f1, 2),
        "n_queries": len(labels),
        "n_clusters": len(set(finals)),
    }
    _write_text(args.out or cfg.out_path or "-", json.dumps(row, sort_keys=True) + "\n")
    return 0


def _cmd_ablate(cfg, args):
    events_path = _require(args.events or cfg.events_path, "--events", "a labeled event file")
    out = _require(args.out or cfg.out_path, "--out", "an output path")
    events, labels = _read_labeled(events_path, need_labels=True)
    bundle = ModelBundle()
    model_path = args.model or cfg.model_path
    if model_path is not None:
        bundle = _load_bundle(cfg, model_path)
    rows = []
    timing_rows = {}
    for mode in cfg.modes:
        decisions, store, timing = _stream_once(cfg, events, bundle, mode=mode)
        finals = resolve_final_ids(decisions, store)
        p, r, f1 = bcubed(finals, labels)
        rows.append({
            "label": MODE_LABELS[mode],
            "precision_pct": round(100.0 * p, 2),
            "recall_pct": round(100.0 * r, 2),
            "f1_pct": round(100.0 * f1, 2),
            "s_ptq": None,  # wall-clock lives in the timing file
            "n_records": len(store.records) if store else 0,
        })
        timing_rows[MODE_LABELS[mode]] = timing
        log.info("%s: F=%.2f%% (%d records)", MODE_LABELS[mode], 100.0 * f1,
                 rows[-1]["n_records"])
    table = format_rows(rows)
    payload = json.dumps({"rows": rows}, sort_keys=True, indent=2) + "\n"
    _write_text(out, payload + table)
    if args.timing_out:
        with open(args.timing_out, "w", encoding="utf-8") as fh:
            json.dump(timing_rows, fh, indent=2)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _parser():
    top = argparse.ArgumentParser(prog="csgcluster", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, events=False, model=False, out=True):
        p.add_argument("--config", help="YAML run config (defaults apply when omitted)")
        p.add_argument("--preset", help="named packaged config (easy, hard, timing)")
        p.add_argument("--seed", type=int, help="override the run seed")
        if events:
            p.add_argument("--events", help="event file (JSON lines)")
        if model:
            p.add_argument("--model", help="model file")
        if out:
            p.add_argument("--out", help="main output path ('-' for stdout)")

    p = sub.add_parser("simulate", help="generate a labeled synthetic stream")
    common(p)

    p = sub.add_parser("train-trajectory", help="fit the track-link predictor")
    common(p, events=True)

    p = sub.add_parser("train-gcn", help="fit graph embeddings atop a link model")
    common(p, events=True, model=True)

    p = sub.add_parser("stream", help="cluster an event stream")
    common(p, events=True, model=True)
    p.add_argument("--store-out", help="also snapshot the final record store here")
    p.add_argument("--timing-out", help="write wall-clock measurements here")

    p = sub.add_parser("evaluate", help="score a decision log against labels")
    common(p, events=True)
    p.add_argument("--decisions", help="decision log from the stream subcommand")

    p = sub.add_parser("ablate", help="run every configured mode and tabulate")
    common(p, events=True, model=True)
    p.add_argument("--timing-out", help="write per-mode wall-clock measurements here")
    return top


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train-trajectory": _cmd_train_trajectory,
    "train-gcn": _cmd_train_gcn,
    "stream": _cmd_stream,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
}


def main(argv=None):
    level = os.environ.get("CSGCLUSTER_LOG", "info").upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = _parser().parse_args(argv)
    try:
        config_path = args.config
        if args.preset:
            if config_path:
                raise ValueError("pass either --config or --preset, not both")
            config_path = preset_path(args.preset)
        cfg = load_config(config_path, seed=args.seed)
        return _COMMANDS[args.command](cfg, args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
