"""Streaming identity clustering over sighting queries.

Each incoming query is matched against a candidate set whose breadth
depends on the configured mode: the full record store, a time-space
pick gated by the track-link model, or the record nodes of the local
weighted graph run through a trained GCN. A nearest-neighbor assign
folds the query into the closest record (or opens a new one), and the
merge-enabled modes then check the record that just changed against
its nearest candidate neighbor, which repairs earlier over-splitting.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .csg import build_csg
from .gcn import gcn_forward
from .stream_core import (
    DEFAULT_SIGHTING_WINDOW,
    DEFAULT_SPEED_MPS,
    RecordStore,
)
from .trajectory import (
    PaddedProjection,
    node_tokens,
    predict_link_gate,
    project_node,
)
from .vmf import pair_divergence_arrays

MODES = ("baseline", "ts", "ts-m", "ts-m-vmf", "cos-gcn", "csg-gcn")

# Display names for report tables, one per ablation row.
MODE_LABELS = {
    "baseline": "Baseline",
    "ts": "TS",
    "ts-m": "TS-M",
    "ts-m-vmf": "TS-M-vMF",
    "cos-gcn": "Cos-GCN",
    "csg-gcn": "CSG-GCN",
}

MERGE_MODES = frozenset({"ts-m", "ts-m-vmf", "cos-gcn", "csg-gcn"})
GCN_MODES = frozenset({"cos-gcn", "csg-gcn"})
STAGES = ("pick", "link", "weight", "gcn", "nn")


@dataclass
class EngineConfig:
    """Knobs for one streaming run.

    xi_assign / xi_merge are cosine-distance thresholds (0 < xi < 2).
    The vMF mode reads the separately scaled xi_assign_vmf /
    xi_merge_vmf since its divergence distance is not bounded by 2, and
    the GCN modes read xi_assign_emb / xi_merge_emb when set (their
    embedding space is trained, so its distance scale need not match
    the raw feature space); left as None those fall back to
    xi_assign / xi_merge. Assign and merge both use strict less-than.
    """

    mode: str = "csg-gcn"
    xi_assign: float = 0.91
    xi_merge: float = 0.88
    xi_assign_vmf: float = 2.0
    xi_merge_vmf: float = 1.0
    xi_assign_emb: float = None
    xi_merge_emb: float = None
    csg_size: int = 256
    speed: float = DEFAULT_SPEED_MPS
    window: int = DEFAULT_SIGHTING_WINDOW
    cell_seconds: float = 15.0
    eval_point: str = "merged"
    mu_term: str = "full"
    time_tolerance: float = 0.0
    link_all_fallback: bool = False

    def __post_init__(self):
        self.mode = str(self.mode).lower()
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("xi_assign", "xi_merge"):
            v = getattr(self, name)
            if not 0.0 < v < 2.0:
                raise ValueError(f"{name} must be in (0, 2), got {v}")
        for name in ("xi_assign_vmf", "xi_merge_vmf"):
            v = getattr(self, name)
            if v <= 0.0:
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("xi_assign_emb", "xi_merge_emb"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 2.0:
                raise ValueError(f"{name} must be in (0, 2) when set, got {v}")
        if int(self.csg_size) != self.csg_size or self.csg_size < 2:
            raise ValueError(f"csg_size must be an integer >= 2, got {self.csg_size}")
        self.csg_size = int(self.csg_size)
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.cell_seconds <= 0:
            raise ValueError("cell_seconds must be positive")
        if self.eval_point not in ("merged", "first"):
            raise ValueError(f"unknown eval_point {self.eval_point!r}")
        if self.mu_term not in ("full", "projected"):
            raise ValueError(f"unknown mu_term {self.mu_term!r}")
        if self.time_tolerance < 0:
            raise ValueError("time_tolerance must be non-negative")


@dataclass
class ModelBundle:
    """Trained parameters the mode ladder may need.

    gcn_cos serves the cosine-weighted graph mode and gcn_vmf the
    divergence-weighted one; each is trained on graphs built with the
    matching weight rule, so they are not interchangeable.
    """

    trajectory: object = None
    gcn_cos: object = None
    gcn_vmf: object = None


@dataclass
class Decision:
    """Outcome of one processed query.

    merges holds (survivor_id, absorbed_id, distance) triples executed
    right after this query's assign step. min_distance is None when the
    candidate set was empty.
    """

    query_index: int
    kind: str  # "assigned" | "new"
    target_record: int
    min_distance: float | None = None
    n_candidates: int = 0
    merges: list = field(default_factory=list)


def _cosine_distance(u, v):
    # Unit inputs; a degenerate (None) direction carries no similarity
    # evidence, so it lands at the orthogonal distance 1.0.
    if u is None or v is None:
        return 1.0
    return 1.0 - float(u @ v)


def _unit_or_none(vec):
    n = float(np.linalg.norm(vec))
    if n <= 0 or not math.isfinite(n):
        return None
    return vec / n


class StreamEngine:
    """Order-dependent clustering state folded over a query stream."""

    def __init__(self, models=None, config=None):
        self.config = config if config is not None else EngineConfig()
        self.models = models if models is not None else ModelBundle()
        cfg = self.config
        # Fail at stream start rather than murking up the per-query path.
        if cfg.mode != "baseline" and self.models.trajectory is None and not cfg.link_all_fallback:
            raise ValueError(
                f"mode {cfg.mode!r} needs a trained trajectory link model "
                "(or link_all_fallback=True)"
            )
        if cfg.mode == "cos-gcn" and self.models.gcn_cos is None:
            raise ValueError("mode 'cos-gcn' needs a trained gcn_cos model")
        if cfg.mode == "csg-gcn" and self.models.gcn_vmf is None:
            raise ValueError("mode 'csg-gcn' needs a trained gcn_vmf model")
        self.store = None  # created on the first query, dim taken from it
        self.timings = {s: 0.0 for s in STAGES}
        self._caches = {}
        self._expected_count = 0
        self._n_processed = 0
        self._last_t = -math.inf

    # -- candidate selection ---------------------------------------------

    def _link_gate(self, query, records):
        """Keep records the track model links to the query, either direction."""
        params = self.models.trajectory
        if params is None:
            return records
        if not records:
            return []
        proj_cache = self._caches.setdefault("proj", {})
        q_proj = project_node(node_tokens(query, params), params)
        # Cached pads share one width so the gate can stack them; the width
        # tracks the largest record seen, doubling so growth stays rare.
        width = self._caches.get("pad_width", 4)
        need = max(len(rec.sightings) for rec in records)
        if need > width or len(proj_cache) > 30000:
            live = self.store.records
            stale = [
                key for key in proj_cache
                if key[0] not in live or live[key[0]].version != key[1]
            ]
            for key in stale:
                del proj_cache[key]
        if need > width:
            width = min(max(need, 2 * width), max(self.store.window, need))
            self._caches["pad_width"] = width
            for key, pr in proj_cache.items():
                proj_cache[key] = pr.repad(width)
        projs = []
        for rec in records:
            key = (rec.record_id, rec.version)
            pr = proj_cache.get(key)
            if pr is None:
                pr = PaddedProjection.from_tokens(node_tokens(rec, params), params, width)
                proj_cache[key] = pr
            projs.append(pr)
        fwd, rev = predict_link_gate(q_proj, projs, params)
        hit = (fwd >= 0.5) | (rev >= 0.5)
        return [rec for rec, h in zip(records, hit) if h]

    def _gather_candidates(self, query):
        """Mode-dependent candidate records plus the data NN needs.

        Returns (records, assign_dist_of, pair_space, pair_data) where
        assign_dist_of(i) is the query-to-candidate-i distance,
        pair_space is one of "cos"/"vmf"/"emb" and pair_data carries
        per-candidate state the merge pass measures partners on.
        """
        cfg = self.config
        mode = cfg.mode
        store = self.store

        if mode in GCN_MODES:
            weight_mode = "cos" if mode == "cos-gcn" else "vmf"
            graph = build_csg(
                store,
                query,
                self.models.trajectory,
                csg_size=cfg.csg_size,
                weight_mode=weight_mode,
                eval_point=cfg.eval_point,
                mu_term=cfg.mu_term,
                link_all_fallback=cfg.link_all_fallback,
                caches=self._caches,
                timings=self.timings,
            )
            if graph.size < 2:
                return [], None, "emb", None
            t0 = time.perf_counter()
            params = self.models.gcn_cos if mode == "cos-gcn" else self.models.gcn_vmf
            emb = gcn_forward(graph, params).unit_embeddings
            self.timings["gcn"] += time.perf_counter() - t0
            records = [store.records[rid] for rid in graph.node_ids[1:]]

            def dist_of(i):
                return 1.0 - float(emb[0] @ emb[1 + i])

            return records, dist_of, "emb", emb

        if mode == "baseline":
            t0 = time.perf_counter()
            records = list(store.records.values())
            self.timings["pick"] += time.perf_counter() - t0
        else:
            t0 = time.perf_counter()
            picked = store.pick_nearest(query, cfg.csg_size - 1)
            records = [store.records[rid] for _, rid in picked]
            self.timings["pick"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            records = self._link_gate(query, records)
            self.timings["link"] += time.perf_counter() - t0
        if not records:
            return [], None, "cos", None

        if mode == "ts-m-vmf":
            n = len(records)
            counts_q = np.full(n, float(query.cf.count))
            ls_q = np.broadcast_to(query.cf.linear_sum, (n, query.cf.linear_sum.size))
            counts_r = np.array([r.cf.count for r in records], dtype=np.float64)
            ls_r = np.vstack([r.cf.linear_sum for r in records])
            t0 = time.perf_counter()
            dists, _ = pair_divergence_arrays(
                counts_q, ls_q, counts_r, ls_r,
                eval_point=cfg.eval_point, mu_term=cfg.mu_term,
            )
            self.timings["nn"] += time.perf_counter() - t0

            def dist_of(i):
                return float(dists[i])

            return records, dist_of, "vmf", (counts_r, ls_r)

        # cosine on CF mean directions, one candidate at a time
        q_dir = _unit_or_none(query.cf.linear_sum)

        def dist_of(i):
            return _cosine_distance(q_dir, records[i].mean_direction())

        # only the merge pass reads pair_data; baseline and plain ts
        # skip building it
        snapshot_dirs = None
        if mode in MERGE_MODES:
            snapshot_dirs = [r.mean_direction() for r in records]
        return records, dist_of, "cos", snapshot_dirs

    # -- merge pass --------------------------------------------------------

    def _merge_pass(self, records, pair_space, pair_data, xi_merge, touched, touched_idx):
        """Nearest-record check for the one record this query changed.

        Only the assigned-to (or newly created) record can have drifted,
        so it alone is measured against the other candidates, on its
        state after the assignment folded the query in. At most one
        merge happens per query; longer chains resolve over later
        queries. The older record survives so downstream ids stay
        stable.
        """
        partners = [
            (j, r) for j, r in enumerate(records) if r.record_id != touched.record_id
        ]
        if not partners:
            return []
        if pair_space == "emb":
            emb = pair_data
            t_emb = emb[0] if touched_idx is None else emb[1 + touched_idx]
            dists = [1.0 - float(t_emb @ emb[1 + j]) for j, _ in partners]
        elif pair_space == "vmf":
            counts_r, ls_r = pair_data
            idxs = np.array([j for j, _ in partners])
            n = idxs.size
            counts_t = np.full(n, float(touched.cf.count))
            ls_t = np.broadcast_to(touched.cf.linear_sum, (n, touched.cf.linear_sum.size))
            dists, _ = pair_divergence_arrays(
                counts_t, ls_t, counts_r[idxs], ls_r[idxs],
                eval_point=self.config.eval_point, mu_term=self.config.mu_term,
            )
        else:
            t_dir = touched.mean_direction()
            dists = [_cosine_distance(t_dir, pair_data[j]) for j, _ in partners]
        k = int(np.argmin(dists))
        best = float(dists[k])
        if not best < xi_merge:
            return []
        partner = partners[k][1]
        dst, src = (touched, partner)
        if partner.record_id < touched.record_id:
            dst, src = (partner, touched)
        self.store.merge_into(dst.record_id, src.record_id)
        return [(dst.record_id, src.record_id, best)]

    # -- the per-query step --------------------------------------------------

    def process_query(self, query):
        cfg = self.config
        idx = self._n_processed
        t_tilde = query.sighting.t_tilde
        if t_tilde < self._last_t - cfg.time_tolerance:
            raise ValueError(
                f"event {idx} out of order: t_tilde {t_tilde:.6f} precedes "
                f"{self._last_t:.6f} beyond tolerance {cfg.time_tolerance}"
            )
        self._last_t = max(self._last_t, t_tilde)
        if self.store is None:
            self.store = RecordStore(
                dim=query.cf.linear_sum.size,
                speed=cfg.speed,
                cell_seconds=cfg.cell_seconds,
                window=cfg.window,
            )

        records, dist_of, pair_space, pair_data = self._gather_candidates(query)

        if cfg.mode == "ts-m-vmf":
            xi_a, xi_m = cfg.xi_assign_vmf, cfg.xi_merge_vmf
        elif cfg.mode in GCN_MODES:
            xi_a = cfg.xi_assign if cfg.xi_assign_emb is None else cfg.xi_assign_emb
            xi_m = cfg.xi_merge if cfg.xi_merge_emb is None else cfg.xi_merge_emb
        else:
            xi_a, xi_m = cfg.xi_assign, cfg.xi_merge

        t0 = time.perf_counter()
        best_rid = None
        best_idx = None
        best_dist = math.inf
        for i, rec in enumerate(records):
            d = dist_of(i)
            if d < best_dist or (d == best_dist and rec.record_id < best_rid):
                best_dist = d
                best_rid = rec.record_id
                best_idx = i
        if best_rid is not None and best_dist < xi_a:
            self.store.assign(best_rid, query)
            kind, target, touched_idx = "assigned", best_rid, best_idx
        else:
            rec = self.store.new_record(query)
            kind, target, touched_idx = "new", rec.record_id, None

        merges = []
        if cfg.mode in MERGE_MODES and records:
            merges = self._merge_pass(
                records, pair_space, pair_data, xi_m,
                self.store.records[target], touched_idx,
            )
        self.timings["nn"] += time.perf_counter() - t0

        self._expected_count += query.cf.count
        self._n_processed += 1
        if self._n_processed % 1024 == 0:
            self.check_conservation()
        return Decision(
            query_index=idx,
            kind=kind,
            target_record=target,
            min_distance=None if best_rid is None else float(best_dist),
            n_candidates=len(records),
            merges=merges,
        )

    def check_conservation(self):
        """Every feature delivered by the stream sits in exactly one record."""
        actual = 0
        if self.store is not None:
            actual = sum(r.cf.count for r in self.store.records.values())
        if actual != self._expected_count:
            raise RuntimeError(
                f"feature-count conservation broken: records hold {actual}, "
                f"stream delivered {self._expected_count}"
            )


def run_stream(events, models=None, config=None):
    """Fold the engine over a time-ordered query list.

    Returns (decisions, store, timing). store is None when the stream
    was empty. timing carries total seconds, seconds per thousand
    queries and the per-stage breakdown.
    """
    engine = StreamEngine(models=models, config=config)
    decisions = []
    t_start = time.perf_counter()
    for query in events:
        decisions.append(engine.process_query(query))
    total = time.perf_counter() - t_start
    engine.check_conservation()
    n = len(decisions)
    timing = {
        "n_queries": n,
        "total_s": total,
        "s_ptq": (1000.0 * total / n) if n else 0.0,
        "stages": dict(engine.timings),
    }
    return decisions, engine.store, timing
