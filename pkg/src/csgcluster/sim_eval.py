"""Synthetic grocery-floor streams plus the evaluation toolkit.

The simulator walks identities camera-to-camera across a rectangular
floor and emits labeled sighting queries with vMF-distributed
appearance features, deterministic per seed. The evaluation side
scores predicted record ids against true identities with BCubed
precision/recall/F and renders report tables; the corpus builder cuts
a labeled stream into training material for both networks.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .csg import build_csg, row_normalize
from .engine import EngineConfig, ModelBundle
from .gcn import train_gcn
from .stream_core import DEFAULT_SPEED_MPS, Query, RecordStore, Sighting
from .trajectory import train_trajectory
from .vmf import vmf_sample


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------


@dataclass
class Camera:
    cam_id: int
    pos: np.ndarray  # (2,) metres
    radius: float

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("camera view radius must be positive")


def camera_grid(floor, spacing=10.0, radius=7.5):
    """Regular camera grid over the floor rectangle.

    With radius >= spacing / sqrt(2) the discs cover the whole floor.
    """
    w, h = floor
    xs = np.arange(spacing / 2.0, w, spacing)
    ys = np.arange(spacing / 2.0, h, spacing)
    cams = []
    for y in ys:
        for x in xs:
            cams.append(Camera(cam_id=len(cams), pos=np.array([x, y]), radius=radius))
    return cams


@dataclass
class GroceryScenario:
    """Everything needed to generate one labeled stream."""

    n_identities: int = 200
    feature_dim: int = 64
    kappa: float = 100.0
    floor: tuple = (50.0, 30.0)
    cameras: list = None
    camera_spacing: float = 10.0
    camera_radius: float = 7.5
    duration: float = 3600.0
    sightings_range: tuple = (12, 28)
    snapshots_range: tuple = (1, 3)
    walk_speed_frac: tuple = (0.55, 0.95)
    pause_mean: float = 20.0
    pause_min: float = 0.5
    speed: float = DEFAULT_SPEED_MPS
    waypoint_jitter: float = 0.0
    entry_lead: float = 30.0
    # Lookalike appearance: with archetypes > 0, identity mean
    # directions cluster around that many shared directions (identity i
    # belongs to group i mod archetypes), perturbed by
    # archetype_spread-scaled gaussian noise before renormalizing.
    # Small spreads give near-identical outfits that only time-space
    # context can tell apart; 0 keeps every identity independent.
    archetypes: int = 0
    archetype_spread: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 1:
            raise ValueError("need at least one identity")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.floor[0] <= 0 or self.floor[1] <= 0:
            raise ValueError("floor sides must be positive")
        if self.duration <= self.entry_lead:
            raise ValueError("duration must exceed entry_lead")
        lo, hi = self.sightings_range
        if lo < 1 or hi < lo:
            raise ValueError("sightings_range must be 1 <= lo <= hi")
        lo, hi = self.snapshots_range
        if lo < 1 or hi < lo:
            raise ValueError("snapshots_range must be 1 <= lo <= hi")
        lo, hi = self.walk_speed_frac
        if not (0 < lo <= hi <= 1.0):
            # walking speed may not exceed the gating scale, else the
            # time-space pick could miss true neighbors
            raise ValueError("walk_speed_frac must satisfy 0 < lo <= hi <= 1")
        if self.archetypes < 0:
            raise ValueError("archetypes must be non-negative")
        if self.archetype_spread < 0:
            raise ValueError("archetype_spread must be non-negative")
        if self.cameras is None:
            self.cameras = camera_grid(self.floor, self.camera_spacing, self.camera_radius)
        if not self.cameras:
            raise ValueError("scenario has no cameras")


@dataclass
class LabeledStream:
    """Time-ordered queries with one identity label per event."""

    events: list
    labels: list

    def __post_init__(self):
        if len(self.events) != len(self.labels):
            raise ValueError(
                f"{len(self.events)} events but {len(self.labels)} labels"
            )
        prev = -math.inf
        for i, q in enumerate(self.events):
            t = q.sighting.t_tilde
            if t < prev:
                raise ValueError(f"event {i} breaks the time ordering")
            prev = t

    def __len__(self):
        return len(self.events)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _covering_camera(wp, cameras):
    best = None
    best_d = math.inf
    for cam in cameras:
        dcam = float(np.linalg.norm(wp - cam.pos))
        if dcam <= cam.radius and dcam < best_d:
            best = cam
            best_d = dcam
    return best


def _walk_identity(ident, scenario, rng, arch_dirs=None):
    """All sightings of one identity as (query, label, tiebreak) rows.

    Waypoints are camera positions (plus optional jitter), and the
    sighting window is symmetric around the arrival instant, so the
    midpoint-implied speed between consecutive sightings never exceeds
    the walking speed.
    """
    sc = scenario
    d = sc.feature_dim
    if arch_dirs is None:
        mu = rng.standard_normal(d)
    else:
        mu = arch_dirs[ident % len(arch_dirs)] + sc.archetype_spread * rng.standard_normal(d)
    mu /= np.linalg.norm(mu)
    n_sights = int(rng.integers(sc.sightings_range[0], sc.sightings_range[1] + 1))
    v_walk = float(rng.uniform(*sc.walk_speed_frac)) * sc.speed
    t_arr = float(rng.uniform(sc.entry_lead, sc.duration))
    prev_wp = None
    pose = None
    rows = []
    for _ in range(n_sights):
        cam = sc.cameras[int(rng.integers(len(sc.cameras)))]
        wp = cam.pos.copy()
        if sc.waypoint_jitter > 0:
            ang = rng.uniform(0.0, 2.0 * math.pi)
            rad = sc.waypoint_jitter * math.sqrt(rng.uniform())
            wp = wp + rad * np.array([math.cos(ang), math.sin(ang)])
        seen_by = _covering_camera(wp, sc.cameras)
        if seen_by is None:
            raise ValueError(
                f"waypoint ({wp[0]:.2f}, {wp[1]:.2f}) of identity {ident} "
                "is outside every camera's view"
            )
        if prev_wp is not None:
            hop = float(np.linalg.norm(wp - prev_wp))
            pause = sc.pause_min + float(rng.exponential(sc.pause_mean))
            t_arr = t_arr + pause + hop / v_walk
            if hop > 1e-9:
                pose = (wp - prev_wp) / hop
        if pose is None:
            ang = rng.uniform(0.0, 2.0 * math.pi)
            pose = np.array([math.cos(ang), math.sin(ang)])
        w_max = 2.0 * seen_by.radius / v_walk
        width = float(rng.uniform(min(1.0, w_max), w_max))
        n_snap = int(rng.integers(sc.snapshots_range[0], sc.snapshots_range[1] + 1))
        feats = vmf_sample(mu, sc.kappa, n_snap, rng)
        sight = Sighting(
            t_start=t_arr - width / 2.0,
            t_end=t_arr + width / 2.0,
            cam_pos=seen_by.pos.copy(),
            pose=pose.copy(),
            cam_id=seen_by.cam_id,
        )
        rows.append((Query.from_features(sight, feats), ident))
        prev_wp = wp
    return rows


def simulate(scenario):
    """Generate a labeled stream; same scenario and seed, same stream."""
    ss = np.random.SeedSequence(scenario.seed)
    children = ss.spawn(scenario.n_identities + 1)
    arch_dirs = None
    if scenario.archetypes > 0:
        arch_rng = np.random.default_rng(children[0])
        arch_dirs = arch_rng.standard_normal((scenario.archetypes, scenario.feature_dim))
        arch_dirs /= np.linalg.norm(arch_dirs, axis=1, keepdims=True)
    rows = []
    for ident, child in enumerate(children[1:]):
        rows.extend(
            _walk_identity(ident, scenario, np.random.default_rng(child), arch_dirs)
        )
    rows.sort(key=lambda r: (r[0].sighting.t_tilde, r[1]))
    return LabeledStream(events=[r[0] for r in rows], labels=[r[1] for r in rows])


# ---------------------------------------------------------------------------
# BCubed scoring
# ---------------------------------------------------------------------------


def bcubed(pred_labels, true_labels):
    """(precision, recall, F) with self-pairs included.

    For item i, precision is the fraction of i's predicted cluster that
    shares i's true label; recall is the fraction of i's true cluster
    that shares i's predicted label; both are averaged over items.
    """
    pred = np.asarray(list(pred_labels))
    true = np.asarray(list(true_labels))
    if pred.shape != true.shape:
        raise ValueError(f"{pred.shape[0]} predictions vs {true.shape[0]} labels")
    if pred.size == 0:
        raise ValueError("nothing to score")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(true, return_inverse=True)
    size_p = np.bincount(pi)
    size_t = np.bincount(ti)
    joint = pi.astype(np.int64) * (ti.max() + 1) + ti
    _, joint_inv, joint_n = np.unique(joint, return_inverse=True, return_counts=True)
    shared = joint_n[joint_inv].astype(np.float64)
    precision = float(np.mean(shared / size_p[pi]))
    recall = float(np.mean(shared / size_t[ti]))
    f1 = 2.0 * precision * recall / (precision + recall)
    return precision, recall, f1


def bcubed_brute(pred_labels, true_labels):
    """Literal all-pairs definition; the oracle for the grouped version."""
    pred = list(pred_labels)
    true = list(true_labels)
    if len(pred) != len(true):
        raise ValueError(f"{len(pred)} predictions vs {len(true)} labels")
    if not pred:
        raise ValueError("nothing to score")
    n = len(pred)
    p_sum = 0.0
    r_sum = 0.0
    for i in range(n):
        same_p = [j for j in range(n) if pred[j] == pred[i]]
        same_t = [j for j in range(n) if true[j] == true[i]]
        correct_p = sum(1 for j in same_p if true[j] == true[i])
        correct_t = sum(1 for j in same_t if pred[j] == pred[i])
        p_sum += correct_p / len(same_p)
        r_sum += correct_t / len(same_t)
    precision = p_sum / n
    recall = r_sum / n
    return precision, recall, 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Training corpora
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    """Knobs for cutting a labeled stream into training material.

    fragment_every makes the oracle replay open a fresh record for an
    identity after that many of its events instead of folding
    everything into one record per identity. Without it every graph
    node would carry a distinct identity and the embedding loss would
    never see a same-identity record pair, leaving record-to-record
    geometry untrained even though the merge pass decides on exactly
    those distances.
    """

    val_fraction: float = 0.2
    window_range: tuple = (1, 6)
    pairs_per_identity: int = 20
    graph_stride: int = 4
    csg_size: int = 64
    min_graph_nodes: int = 3
    fragment_every: int = 3
    weight_modes: tuple = ("cos", "vmf")
    eval_point: str = "merged"
    mu_term: str = "full"
    traj_params: object = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")
        lo, hi = self.window_range
        if lo < 1 or hi < lo:
            raise ValueError("window_range must be 1 <= lo <= hi")
        if self.pairs_per_identity < 1:
            raise ValueError("pairs_per_identity must be positive")
        if self.graph_stride < 1:
            raise ValueError("graph_stride must be positive")
        if self.fragment_every < 1:
            raise ValueError("fragment_every must be positive")
        for m in self.weight_modes:
            if m not in ("cos", "vmf"):
                raise ValueError(f"unknown weight mode {m!r}")


@dataclass
class TrainingCorpora:
    traj_train: list
    traj_val: list
    graphs_train: dict
    graphs_val: dict
    train_identities: list
    val_identities: list


def _window(sights, rng, window_range):
    length = int(rng.integers(window_range[0], min(window_range[1], len(sights)) + 1))
    start = int(rng.integers(0, len(sights) - length + 1))
    return sights[start : start + length]


def _trajectory_pairs(by_identity, idents, rng, config):
    """Balanced positive/negative sighting-window pairs within one split."""
    pairs = []
    usable = [i for i in idents if len(by_identity[i]) >= 2]
    for ident in usable:
        sights = [q.sighting for q in by_identity[ident]]
        for _ in range(config.pairs_per_identity):
            pairs.append((
                _window(sights, rng, config.window_range),
                _window(sights, rng, config.window_range),
                1,
            ))
    n_pos = len(pairs)
    if len(usable) >= 2:
        for _ in range(n_pos):
            a, b = rng.choice(len(usable), size=2, replace=False)
            sa = [q.sighting for q in by_identity[usable[a]]]
            sb = [q.sighting for q in by_identity[usable[b]]]
            pairs.append((
                _window(sa, rng, config.window_range),
                _window(sb, rng, config.window_range),
                0,
            ))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def _replay_graphs(stream, indices, weight_mode, config):
    """Labeled graphs from an oracle replay over one split's events.

    Each stride-th query gets a graph built against the store as it
    stood, then the query is folded into its true identity's current
    record, so node labels are exact by construction. A fresh record is
    opened for an identity every fragment_every of its events, keeping
    same-identity record pairs in the graphs. Every third graph whose
    query found its own records also yields a variant with those
    records sliced out: the live store sees queries whose record sits
    outside the picked neighborhood (a shopper dormant in one aisle),
    and the encoder must learn to keep such queries away from
    strangers rather than snapping to the nearest one.
    """
    if not indices:
        return []
    dim = stream.events[indices[0]].cf.linear_sum.size
    store = RecordStore(dim=dim)
    label_to_rid = {}
    rid_to_label = {}
    assigned = {}
    caches = {}
    graphs = []
    n_with_true = 0
    for n, i in enumerate(indices):
        q = stream.events[i]
        label = stream.labels[i]
        if n % config.graph_stride == 0 and len(store) >= config.min_graph_nodes:
            g = build_csg(
                store,
                q,
                config.traj_params,
                csg_size=config.csg_size,
                weight_mode=weight_mode,
                eval_point=config.eval_point,
                mu_term=config.mu_term,
                link_all_fallback=config.traj_params is None,
                caches=caches,
            )
            if not g.isolated and g.size >= config.min_graph_nodes:
                node_labels = np.array(
                    [label] + [rid_to_label[rid] for rid in g.node_ids[1:]]
                )
                graphs.append((g.features, g.adjacency, node_labels))
                if (node_labels[1:] == label).any():
                    n_with_true += 1
                    if n_with_true % 3 == 0:
                        keep = np.flatnonzero(
                            np.concatenate(([True], node_labels[1:] != label))
                        )
                        if keep.size >= config.min_graph_nodes:
                            sub = np.ix_(keep, keep)
                            graphs.append((
                                g.features[keep],
                                row_normalize(g.weights[sub]),
                                node_labels[keep],
                            ))
        if label in label_to_rid and assigned[label] < config.fragment_every:
            store.assign(label_to_rid[label], q)
            assigned[label] += 1
        else:
            rec = store.new_record(q)
            label_to_rid[label] = rec.record_id
            rid_to_label[rec.record_id] = label
            assigned[label] = 1
    return graphs


def build_training_corpora(stream, config=None):
    """Cut a labeled stream into per-identity-split training material.

    Identities are partitioned before anything is sampled, and the two
    graph replays run over disjoint event subsets, so no identity leaks
    between train and validation in either corpus. With fewer than four
    identities the validation side stays empty.
    """
    config = config if config is not None else CorpusConfig()
    idents = sorted(set(stream.labels))
    if len(idents) < 2:
        raise ValueError("need at least 2 identities to build training pairs")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(idents))
    n_val = int(round(config.val_fraction * len(idents))) if len(idents) >= 4 else 0
    val_ids = sorted(idents[i] for i in order[:n_val])
    train_ids = sorted(idents[i] for i in order[n_val:])

    by_identity = {i: [] for i in idents}
    idx_of = {i: [] for i in idents}
    for n, (q, label) in enumerate(zip(stream.events, stream.labels)):
        by_identity[label].append(q)
        idx_of[label].append(n)

    traj_train = _trajectory_pairs(by_identity, train_ids, rng, config)
    traj_val = _trajectory_pairs(by_identity, val_ids, rng, config) if val_ids else []

    def split_indices(ids):
        merged = sorted(n for i in ids for n in idx_of[i])
        return merged

    graphs_train = {}
    graphs_val = {}
    for mode in config.weight_modes:
        graphs_train[mode] = _replay_graphs(stream, split_indices(train_ids), mode, config)
        graphs_val[mode] = (
            _replay_graphs(stream, split_indices(val_ids), mode, config) if val_ids else []
        )
    return TrainingCorpora(
        traj_train=traj_train,
        traj_val=traj_val,
        graphs_train=graphs_train,
        graphs_val=graphs_val,
        train_identities=list(train_ids),
        val_identities=list(val_ids),
    )


def fit_models(stream, corpus_config=None, traj_config=None, gcn_config=None, seed=0):
    """Train every model the mode ladder can need, from one stream.

    Two passes over the corpus builder: sighting-window pairs first
    (the link model has no prerequisites), then graph corpora built
    with the trained link model so their link structure matches what
    the engine will produce at inference. Returns (ModelBundle,
    TrainingCorpora from the second pass).
    """
    corpus_config = corpus_config if corpus_config is not None else CorpusConfig(seed=seed)
    pair_cfg = replace(corpus_config, weight_modes=())
    pairs = build_training_corpora(stream, pair_cfg)
    traj_params, _ = train_trajectory(pairs.traj_train, traj_config, seed=seed)

    graph_cfg = replace(corpus_config, traj_params=traj_params)
    corpora = build_training_corpora(stream, graph_cfg)
    bundle = ModelBundle(trajectory=traj_params)
    for mode in graph_cfg.weight_modes:
        params, _ = train_gcn(
            corpora.graphs_train[mode],
            gcn_config,
            seed=seed,
            val_corpus=corpora.graphs_val[mode] or None,
        )
        if mode == "cos":
            bundle.gcn_cos = params
        else:
            bundle.gcn_vmf = params
    return bundle, corpora


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def resolve_final_ids(decisions, store=None):
    """Predicted label per query: the target record id followed through
    every merge recorded in the decision log. A query assigned to a
    record that later merged inherits the survivor's id."""
    tomb = {}
    for d in decisions:
        for survivor, absorbed, _dist in d.merges:
            tomb[absorbed] = survivor
    finals = []
    for d in decisions:
        rid = d.target_record
        hops = 0
        while rid in tomb:
            rid = tomb[rid]
            hops += 1
            if hops > len(tomb):
                raise RuntimeError("tombstone chain does not terminate")
        finals.append(rid)
    if store is not None:
        for d, rid in zip(decisions, finals):
            if rid not in store.records:
                raise ValueError(
                    f"unresolved tombstone: query {d.query_index} resolves to "
                    f"record {rid} which is not in the store"
                )
    return finals


def format_rows(rows):
    """Aligned text table; one row per evaluated run."""
    header = f"{'run':<12} {'P':>8} {'R':>8} {'F':>8} {'s/ptq':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        sptq = f"{r['s_ptq']:.2f}" if r.get("s_ptq") is not None else "-"
        lines.append(
            f"{r['label']:<12} {r['precision_pct']:>8.2f} {r['recall_pct']:>8.2f} "
            f"{r['f1_pct']:>8.2f} {sptq:>10}"
        )
    return "\n".join(lines) + "\n"


def report(decisions, labels, timing=None, store=None, label="run"):
    """Score one run; returns {"rows": [...], "text": table} with
    percentages rounded to two decimals."""
    if len(decisions) != len(labels):
        raise ValueError(f"{len(decisions)} decisions vs {len(labels)} labels")
    preds = resolve_final_ids(decisions, store)
    p, r, f1 = bcubed(preds, labels)
    row = {
        "label": label,
        "precision_pct": round(100.0 * p, 2),
        "recall_pct": round(100.0 * r, 2),
        "f1_pct": round(100.0 * f1, 2),
        "s_ptq": None if timing is None else round(timing["s_ptq"], 2),
        "n_queries": len(labels),
    }
    return {"rows": [row], "text": format_rows([row])}


# ---------------------------------------------------------------------------
# Scripted early-split fixture
# ---------------------------------------------------------------------------


def early_split_fixture(seed=0):
    """Stream plus two configs that differ only in the merge pass.

    Single-snapshot queries against single-snapshot records sit near
    cosine distance 1 - A_d(kappa)^2, well above the assign threshold,
    so identities fragment early; as fragments accumulate snapshots
    their mean directions tighten toward the identity mean and fall
    under the merge threshold. The no-merge run keeps the fragments.
    Returns (stream, config_without_merge, config_with_merge).
    """
    scenario = GroceryScenario(
        n_identities=12,
        feature_dim=64,
        kappa=100.0,
        duration=2400.0,
        sightings_range=(24, 32),
        snapshots_range=(1, 1),
        seed=seed,
    )
    stream = simulate(scenario)
    knobs = dict(
        xi_assign=0.35,
        xi_merge=0.30,
        csg_size=64,
        link_all_fallback=True,
    )
    return (
        stream,
        EngineConfig(mode="ts", **knobs),
        EngineConfig(mode="ts-m", **knobs),
    )
