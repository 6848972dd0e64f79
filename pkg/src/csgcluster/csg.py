"""Per-query local graph assembly.

For one incoming query this builds the small graph the embedding
network consumes: gather nearby records (pick), decide which pairs
ride the same walking path (link), score surviving pairs by cluster
similarity (weight), and row-normalize into an adjacency matrix.
"""

from dataclasses import dataclass

import numpy as np

import time

from .stream_core import Query, RecordStore
from .trajectory import node_tokens, predict_link_proj_batch, project_node
from .vmf import pair_divergence_arrays


def row_normalize(m):
    """Divide each row by its sum; all-zero rows get 1 on the diagonal.

    Entries must be non-negative.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    if np.any(m < 0):
        raise ValueError("row_normalize needs non-negative entries")
    sums = m.sum(axis=1)
    out = np.zeros_like(m)
    pos = sums > 0
    out[pos] = m[pos] / sums[pos, None]
    for i in np.flatnonzero(~pos):
        out[i, i] = 1.0
    return out


def _unit_or_zero(vecs):
    """Row-normalize to unit length; zero rows stay zero."""
    vecs = np.asarray(vecs, dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return vecs / safe


def cosine_pair_weights(ls_a, ls_b):
    """(1 + cos)/2 similarity in (0, 1]; zero-resultant rows read as cos 0."""
    ua = _unit_or_zero(ls_a)
    ub = _unit_or_zero(ls_b)
    cos = np.einsum("ij,ij->i", ua, ub)
    return np.maximum(0.5 * (1.0 + cos), 1e-12)


@dataclass
class CrowdedSubGraph:
    """Local graph around one query.

    node_ids[0] is None (the query itself); the rest are record ids in
    pick order. adjacency is row-normalized; linked and weights keep
    the raw stages around for inspection.
    """

    node_ids: list
    features: np.ndarray
    adjacency: np.ndarray
    linked: np.ndarray
    weights: np.ndarray
    isolated: bool

    @property
    def size(self):
        return len(self.node_ids)


def _trivial_graph(query_feature):
    return CrowdedSubGraph(
        node_ids=[None],
        features=query_feature[None, :],
        adjacency=np.array([[1.0]]),
        linked=np.array([[True]]),
        weights=np.array([[1.0]]),
        isolated=True,
    )


def _cached_pair_values(keys, cache, compute_batch):
    """Fill cache misses for record pairs in one vectorized call."""
    missing = [i for i, key in enumerate(keys) if key not in cache]
    if missing:
        vals = compute_batch(missing)
        for i, v in zip(missing, vals):
            cache[keys[i]] = v
    return [cache[key] for key in keys]


def _pair_key(rec_a, rec_b):
    if rec_a.record_id <= rec_b.record_id:
        return (rec_a.record_id, rec_a.version, rec_b.record_id, rec_b.version)
    return (rec_b.record_id, rec_b.version, rec_a.record_id, rec_a.version)


def build_csg(
    store,
    query,
    traj_params,
    csg_size=256,
    weight_mode="vmf",
    eval_point="merged",
    mu_term="full",
    link_all_fallback=False,
    caches=None,
    timings=None,
):
    """Assemble the local graph for one query.

    caches, when given, is a dict with optional "proj", "link" and
    "weight" sub-dicts keyed by record id + version, letting a
    streaming caller skip recomputing pair decisions for unchanged
    records. Pure given a store snapshot, so cached values never go
    stale: any record mutation bumps its version. timings, when given,
    accumulates per-stage seconds under "pick"/"link"/"weight".
    """
    if store is None:
        raise ValueError("record store unavailable")
    if not isinstance(store, RecordStore):
        raise TypeError("store must be a RecordStore")
    if weight_mode not in ("vmf", "cos"):
        raise ValueError(f"unknown weight_mode {weight_mode!r}")
    caches = caches if caches is not None else {}
    proj_cache = caches.setdefault("proj", {})
    link_cache = caches.setdefault("link", {})
    weight_cache = caches.setdefault("weight", {})

    def tick(stage, t0):
        if timings is not None:
            timings[stage] = timings.get(stage, 0.0) + (time.perf_counter() - t0)

    q_feat = _unit_or_zero(query.cf.linear_sum[None, :])[0]
    t0 = time.perf_counter()
    picked = store.pick_nearest(query, csg_size - 1)
    tick("pick", t0)
    if not picked:
        return _trivial_graph(q_feat)
    records = [store.records[rid] for _, rid in picked]
    n = len(records) + 1

    # ---- link stage ----
    t0 = time.perf_counter()
    if traj_params is None:
        if not link_all_fallback:
            raise ValueError("trajectory params required unless link_all_fallback is set")
        linked = np.ones((n, n), dtype=bool)
    else:
        def proj_of(rec):
            key = (rec.record_id, rec.version)
            proj = proj_cache.get(key)
            if proj is None:
                proj = project_node(node_tokens(rec, traj_params), traj_params)
                proj_cache[key] = proj
            return proj

        projs = [project_node(node_tokens(query, traj_params), traj_params)]
        projs += [proj_of(r) for r in records]
        linked = np.eye(n, dtype=bool)
        # query-record pairs are new every time; batch both directions
        fwd = predict_link_proj_batch([projs[0]] * (n - 1), projs[1:], traj_params)
        rev = predict_link_proj_batch(projs[1:], [projs[0]] * (n - 1), traj_params)
        q_hit = (fwd >= 0.5) | (rev >= 0.5)
        linked[0, 1:] = q_hit
        linked[1:, 0] = q_hit
        # record-record pairs go through the cache
        ia, ib = np.triu_indices(n - 1, k=1)
        if ia.size:
            keys = [_pair_key(records[i], records[j]) for i, j in zip(ia, ib)]

            def compute_links(missing):
                La = [projs[1 + ia[m]] for m in missing]
                Lb = [projs[1 + ib[m]] for m in missing]
                f = predict_link_proj_batch(La, Lb, traj_params)
                r = predict_link_proj_batch(Lb, La, traj_params)
                return (f >= 0.5) | (r >= 0.5)

            hits = _cached_pair_values(keys, link_cache, compute_links)
            linked[1 + ia, 1 + ib] = hits
            linked[1 + ib, 1 + ia] = hits
    tick("link", t0)

    if not linked[0, 1:].any():
        return _trivial_graph(q_feat)

    # ---- weight stage ----
    t0 = time.perf_counter()
    counts = np.array([query.cf.count] + [r.cf.count for r in records], dtype=np.float64)
    sums = np.vstack([query.cf.linear_sum] + [r.cf.linear_sum for r in records])

    def weights_for(idx_a, idx_b):
        if weight_mode == "cos":
            return cosine_pair_weights(sums[idx_a], sums[idx_b])
        dist, _ = pair_divergence_arrays(
            counts[idx_a], sums[idx_a], counts[idx_b], sums[idx_b],
            eval_point=eval_point, mu_term=mu_term,
        )
        return np.exp(-dist)

    weights = np.eye(n)
    iq = np.flatnonzero(linked[0, 1:]) + 1
    if iq.size:
        wq = weights_for(np.zeros(iq.size, dtype=int), iq)
        weights[0, iq] = wq
        weights[iq, 0] = wq
    ia, ib = np.nonzero(np.triu(linked, k=1))
    rr = (ia > 0) & (ib > 0)
    ia, ib = ia[rr], ib[rr]
    if ia.size:
        keys = [
            (weight_mode,) + _pair_key(records[i - 1], records[j - 1])
            for i, j in zip(ia, ib)
        ]

        def compute_weights(missing):
            return weights_for(ia[missing], ib[missing])

        vals = _cached_pair_values(keys, weight_cache, compute_weights)
        weights[ia, ib] = vals
        weights[ib, ia] = vals

    adjacency = row_normalize(np.where(linked, weights, 0.0))
    features = np.vstack([q_feat[None, :], _unit_or_zero(sums[1:])])
    tick("weight", t0)
    return CrowdedSubGraph(
        node_ids=[None] + [r.record_id for r in records],
        features=features,
        adjacency=adjacency,
        linked=linked,
        weights=np.where(linked, weights, 0.0),
        isolated=False,
    )


def dump_csg(csg):
    """Line-oriented text rendering for debugging and fixtures."""
    lines = [f"csg nodes={csg.size} isolated={int(csg.isolated)}"]
    for i, rid in enumerate(csg.node_ids):
        name = "query" if rid is None else f"record:{rid}"
        feat = " ".join(f"{x:.6f}" for x in csg.features[i][:4])
        lines.append(f"node {i} {name} feat[:4]= {feat}")
    ia, ib = np.nonzero(np.triu(csg.linked, k=1))
    for i, j in zip(ia, ib):
        lines.append(f"link {i} {j} weight={csg.weights[i, j]:.9f}")
    return "\n".join(lines) + "\n"
