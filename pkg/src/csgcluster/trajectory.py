"""Same-trajectory link predictor.

Scores whether two tracked nodes are moving along the same walking
path. Each node contributes a short sequence of sighting tokens
(floor position, heading, and a time encoding); one node's tokens
attend over the other's through a single residual attention block,
the outputs are mean-pooled, and a two-layer head turns the pooled
vector into a probability.

Everything is plain numpy with a hand-written backward pass, so the
whole block stays dependency-free and bitwise reproducible.
"""

from dataclasses import dataclass, field

import numpy as np

from .netutil import Adam, bce_with_logits, glorot, sigmoid
from .stream_core import PersonRecord, Query, Sighting

SECONDS_PER_DAY = 86400.0

_LOGIT_CLIP = 30.0


@dataclass
class TrajectoryConfig:
    embed_width: int = 64
    hidden_width: int = 64
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 80
    # "sinusoidal" uses a fixed geometric frequency ladder; "learned"
    # trains a bucketed lookup table over time of day instead.
    time_embedding: str = "sinusoidal"
    time_buckets: int = 256
    floor_lo: tuple = (0.0, 0.0)
    floor_hi: tuple = (50.0, 30.0)

    def __post_init__(self):
        if self.embed_width % 2 != 0 or self.embed_width < 4:
            raise ValueError("embed_width must be even and at least 4")
        if self.time_embedding not in ("sinusoidal", "learned"):
            raise ValueError(f"unknown time_embedding {self.time_embedding!r}")


def default_frequencies(embed_width):
    """Angular frequencies whose periods run geometrically 1 s .. 24 h."""
    n = embed_width // 2
    periods = np.geomspace(1.0, SECONDS_PER_DAY, n)
    return 2.0 * np.pi / periods


@dataclass
class TrajectoryParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray  # shape (1,) so the optimizer can update in place
    freq: np.ndarray
    floor_lo: np.ndarray
    floor_hi: np.ndarray
    time_embedding: str = "sinusoidal"
    time_table: np.ndarray = None

    @property
    def embed_width(self):
        return self.w_q.shape[0]

    def trainable(self):
        out = [self.w_q, self.w_k, self.w_v, self.w1, self.b1, self.w2, self.b2]
        if self.time_embedding == "learned":
            out.append(self.time_table)
        return out

    @classmethod
    def init(cls, config, rng):
        e, h = config.embed_width, config.hidden_width
        table = None
        if config.time_embedding == "learned":
            table = 0.02 * rng.standard_normal((config.time_buckets, e))
        return cls(
            w_q=glorot(rng, (e, e)),
            w_k=glorot(rng, (e, e)),
            w_v=glorot(rng, (e, e)),
            w1=glorot(rng, (e, h)),
            b1=np.zeros(h),
            w2=glorot(rng, (h, 1))[:, 0],
            b2=np.zeros(1),
            freq=default_frequencies(e),
            floor_lo=np.asarray(config.floor_lo, dtype=np.float64),
            floor_hi=np.asarray(config.floor_hi, dtype=np.float64),
            time_embedding=config.time_embedding,
            time_table=table,
        )


def _time_bucket(t, n_buckets):
    frac = np.mod(np.asarray(t, dtype=np.float64), SECONDS_PER_DAY) / SECONDS_PER_DAY
    return np.minimum((frac * n_buckets).astype(np.int64), n_buckets - 1)


def temporal_embedding(t, params):
    """Encoding of timestamps (seconds since stream epoch), shape (..., E).

    Sinusoidal mode is deterministic: sin/cos at geometrically spaced
    frequencies spanning 1 s to 24 h. Learned mode looks rows up in a
    trained table bucketed by time of day.
    """
    t = np.asarray(t, dtype=np.float64)
    if params.time_embedding == "learned":
        return params.time_table[_time_bucket(t, params.time_table.shape[0])]
    ang = t[..., None] * params.freq
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _sightings_of(node):
    if isinstance(node, Query):
        return [node.sighting]
    if isinstance(node, PersonRecord):
        return node.sightings
    if isinstance(node, Sighting):
        return [node]
    return list(node)


def _token_geometry(sights, params):
    """Geometry-only token rows (K, E): position and heading lanes, zero elsewhere.

    Positions are normalized to the floor-plan extents; raw meters
    would swamp the unit heading.
    """
    geo = np.zeros((len(sights), params.embed_width))
    pos = np.array([s.cam_pos for s in sights])
    span = params.floor_hi - params.floor_lo
    geo[:, 0:2] = (pos - params.floor_lo) / span
    geo[:, 2:4] = np.array([s.pose for s in sights])
    return geo


def _token_times(sights):
    return np.array([0.5 * (s.t_start + s.t_end) for s in sights])


def node_tokens(node, params):
    """Token matrix (K, E) for one node's sightings.

    Each token is the time encoding plus, on the first four lanes, the
    floor position normalized to the floor-plan extents and the unit
    heading.
    """
    sights = _sightings_of(node)
    if not sights:
        raise ValueError("node has no sightings")
    return _token_geometry(sights, params) + temporal_embedding(_token_times(sights), params)


@dataclass
class TrajectoryInput:
    """Concatenated token sequence for one candidate pair.

    segment is True on the rows contributed by the first node.
    """

    tokens: np.ndarray
    segment: np.ndarray

    @classmethod
    def from_nodes(cls, a, b, params):
        ta = node_tokens(a, params)
        tb = node_tokens(b, params)
        seg = np.concatenate([np.ones(len(ta), bool), np.zeros(len(tb), bool)])
        return cls(tokens=np.concatenate([ta, tb], axis=0), segment=seg)

    def split(self):
        return self.tokens[self.segment], self.tokens[~self.segment]


def _pad_stack(token_list):
    """Stack variable-length (K_i, E) arrays into (B, K_max, E) + mask."""
    kmax = max(t.shape[0] for t in token_list)
    e = token_list[0].shape[1]
    out = np.zeros((len(token_list), kmax, e))
    mask = np.zeros((len(token_list), kmax))
    for i, t in enumerate(token_list):
        out[i, : t.shape[0]] = t
        mask[i, : t.shape[0]] = 1.0
    return out, mask


@dataclass
class NodeProjection:
    """Per-node attention inputs, precomputable once per record version.

    Projecting tokens through W_Q/W_K/W_V is the expensive part of a
    link prediction; a streaming caller caches these so each candidate
    pair costs only the small score/pool/head tail.
    """

    tokens: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


def project_node(tokens, params):
    return NodeProjection(
        tokens=tokens,
        q=tokens @ params.w_q,
        k=tokens @ params.w_k,
        v=tokens @ params.w_v,
    )


def _infer_logits(params, tok_a, q_a, mask_a, k_b, v_b, mask_b):
    """Inference-only forward from precomputed projections."""
    scale = 1.0 / np.sqrt(params.embed_width)
    scores = (q_a @ k_b.transpose(0, 2, 1)) * scale
    scores = scores + (1.0 - mask_b)[:, None, :] * -1e30
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn *= mask_b[:, None, :]
    attn /= attn.sum(axis=-1, keepdims=True)
    attended = tok_a + attn @ v_b
    counts_a = mask_a.sum(axis=1)
    pooled = (attended * mask_a[:, :, None]).sum(axis=1) / counts_a[:, None]
    hidden = np.maximum(pooled @ params.w1 + params.b1, 0.0)
    return hidden @ params.w2 + params.b2[0]


def predict_link_proj_batch(projs_a, projs_b, params, chunk_size=2048):
    """Probabilities for directed pairs of precomputed NodeProjections."""
    n = len(projs_a)
    if n != len(projs_b):
        raise ValueError("projection lists must be the same length")
    probs = np.empty(n)
    for lo in range(0, n, chunk_size):
        hi = min(lo + chunk_size, n)
        tok_a, mask_a = _pad_stack([p.tokens for p in projs_a[lo:hi]])
        q_a, _ = _pad_stack([p.q for p in projs_a[lo:hi]])
        k_b, mask_b = _pad_stack([p.k for p in projs_b[lo:hi]])
        v_b, _ = _pad_stack([p.v for p in projs_b[lo:hi]])
        logits = _infer_logits(params, tok_a, q_a, mask_a, k_b, v_b, mask_b)
        probs[lo:hi] = sigmoid(np.clip(logits, -_LOGIT_CLIP, _LOGIT_CLIP))
    return probs


@dataclass
class PaddedProjection:
    """NodeProjection zero-padded to a fixed row count.

    Equal shapes let a streaming caller np.stack cached candidates
    instead of re-padding them row by row on every query.
    """

    tokens: np.ndarray  # (width, E)
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    count: int

    @classmethod
    def from_tokens(cls, tokens, params, width):
        n = tokens.shape[0]
        if n > width:
            raise ValueError(f"{n} tokens exceed pad width {width}")
        proj = project_node(tokens, params)
        pad = ((0, width - n), (0, 0))
        return cls(
            tokens=np.pad(proj.tokens, pad),
            q=np.pad(proj.q, pad),
            k=np.pad(proj.k, pad),
            v=np.pad(proj.v, pad),
            count=n,
        )

    def repad(self, width):
        """Same projection at a new pad width, without reprojecting."""
        n = self.count
        if n > width:
            raise ValueError(f"{n} tokens exceed pad width {width}")
        pad = ((0, width - n), (0, 0))
        return PaddedProjection(
            tokens=np.pad(self.tokens[:n], pad),
            q=np.pad(self.q[:n], pad),
            k=np.pad(self.k[:n], pad),
            v=np.pad(self.v[:n], pad),
            count=n,
        )


def predict_link_gate(query_proj, padded, params):
    """(query->record, record->query) probabilities against many records.

    query_proj is an unpadded NodeProjection for the query node; padded
    is a list of equally sized PaddedProjection records. Matches
    predict_link_proj_batch on the same pairs; exists because the
    engine calls this once per query on its candidate set.
    """
    n = len(padded)
    if n == 0:
        return np.empty(0), np.empty(0)
    tok_r = np.stack([p.tokens for p in padded])
    q_r = np.stack([p.q for p in padded])
    k_r = np.stack([p.k for p in padded])
    v_r = np.stack([p.v for p in padded])
    counts = np.array([p.count for p in padded], dtype=np.float64)
    mask_r = (np.arange(tok_r.shape[1]) < counts[:, None]).astype(np.float64)

    kq = query_proj.tokens.shape[0]
    tok_q = np.broadcast_to(query_proj.tokens, (n, kq, query_proj.tokens.shape[1]))
    ones_q = np.ones((n, kq))
    fwd = _infer_logits(
        params,
        tok_q, np.broadcast_to(query_proj.q, tok_q.shape), ones_q,
        k_r, v_r, mask_r,
    )
    rev = _infer_logits(
        params,
        tok_r, q_r, mask_r,
        np.broadcast_to(query_proj.k, tok_q.shape),
        np.broadcast_to(query_proj.v, tok_q.shape), ones_q,
    )
    fwd = sigmoid(np.clip(fwd, -_LOGIT_CLIP, _LOGIT_CLIP))
    rev = sigmoid(np.clip(rev, -_LOGIT_CLIP, _LOGIT_CLIP))
    return fwd, rev


def _forward(params, tok_a, mask_a, tok_b, mask_b):
    """Batched forward pass. Returns logits (B,) and the backward cache."""
    e = params.embed_width
    scale = 1.0 / np.sqrt(e)
    q = tok_a @ params.w_q
    k = tok_b @ params.w_k
    v = tok_b @ params.w_v
    scores = (q @ k.transpose(0, 2, 1)) * scale
    scores = scores + (1.0 - mask_b)[:, None, :] * -1e30
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn *= mask_b[:, None, :]
    attn /= attn.sum(axis=-1, keepdims=True)
    # residual add: softmax normalization strips the absolute affinity
    # level, so without the skip connection the head would only ever
    # see convex mixtures of the second node's values
    attended = tok_a + attn @ v
    counts_a = mask_a.sum(axis=1)
    pooled = (attended * mask_a[:, :, None]).sum(axis=1) / counts_a[:, None]
    pre1 = pooled @ params.w1 + params.b1
    hidden = np.maximum(pre1, 0.0)
    logits = hidden @ params.w2 + params.b2[0]
    cache = (tok_a, mask_a, tok_b, mask_b, q, k, v, attn, counts_a, pooled, pre1, hidden, scale)
    return logits, cache


def _backward(params, cache, dlogits):
    """Gradients in trainable() order, plus d(tokens) for the learned table."""
    tok_a, mask_a, tok_b, mask_b, q, k, v, attn, counts_a, pooled, pre1, hidden, scale = cache
    d_w2 = hidden.T @ dlogits
    d_b2 = np.array([dlogits.sum()])
    d_hidden = np.outer(dlogits, params.w2)
    d_pre1 = d_hidden * (pre1 > 0.0)
    d_w1 = pooled.T @ d_pre1
    d_b1 = d_pre1.sum(axis=0)
    d_pooled = d_pre1 @ params.w1.T
    d_attended = (d_pooled[:, None, :] * mask_a[:, :, None]) / counts_a[:, None, None]
    d_attn = d_attended @ v.transpose(0, 2, 1)
    d_v = attn.transpose(0, 2, 1) @ d_attended
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_q = (d_scores @ k) * scale
    d_k = (d_scores.transpose(0, 2, 1) @ q) * scale
    d_wq = np.einsum("bke,bkf->ef", tok_a, d_q)
    d_wk = np.einsum("bke,bkf->ef", tok_b, d_k)
    d_wv = np.einsum("bke,bkf->ef", tok_b, d_v)
    grads = [d_wq, d_wk, d_wv, d_w1, d_b1, d_w2, d_b2]
    if params.time_embedding == "learned":
        d_tok_a = d_q @ params.w_q.T + d_attended  # skip-connection path
        d_tok_b = d_k @ params.w_k.T + d_v @ params.w_v.T
        grads.append((d_tok_a, d_tok_b))
    return grads


def loss_and_grads(params, tok_a, mask_a, tok_b, mask_b, labels, bucket_a=None, bucket_b=None):
    """Mean BCE over one padded batch and its parameter gradients."""
    labels = np.asarray(labels, dtype=np.float64)
    logits, cache = _forward(params, tok_a, mask_a, tok_b, mask_b)
    loss = bce_with_logits(logits, labels)
    dlogits = (sigmoid(logits) - labels) / labels.shape[0]
    grads = _backward(params, cache, dlogits)
    if params.time_embedding == "learned":
        d_tok_a, d_tok_b = grads.pop()
        d_table = np.zeros_like(params.time_table)
        np.add.at(d_table, bucket_a[mask_a > 0], d_tok_a[mask_a > 0])
        np.add.at(d_table, bucket_b[mask_b > 0], d_tok_b[mask_b > 0])
        grads.append(d_table)
    return loss, grads


def _padded_buckets(times_list, kmax, n_buckets):
    out = np.zeros((len(times_list), kmax), dtype=np.int64)
    for i, t in enumerate(times_list):
        out[i, : len(t)] = _time_bucket(np.asarray(t), n_buckets)
    return out


def predict_link_batch(tokens_a, tokens_b, params, chunk_size=2048):
    """Probabilities for many (a, b) directed pairs.

    tokens_a / tokens_b are parallel lists of (K_i, E) token arrays.
    Chunked so a full candidate graph never materializes gigabyte
    score tensors.
    """
    if len(tokens_a) != len(tokens_b):
        raise ValueError("token lists must be the same length")
    return predict_link_proj_batch(
        [project_node(t, params) for t in tokens_a],
        [project_node(t, params) for t in tokens_b],
        params,
        chunk_size=chunk_size,
    )


def predict_link(a, b, params):
    """Probability that nodes a and b ride the same walking path."""
    ta = node_tokens(a, params)
    tb = node_tokens(b, params)
    return float(predict_link_batch([ta], [tb], params)[0])


def link_nodes(nodes, query, params, link_all_fallback=False):
    """Boolean link matrix over [query] + nodes.

    A pair is linked when either direction scores at least 1/2; the
    matrix is symmetric with a true diagonal. With no params (modes
    that skip the link stage) the fallback links everything.
    """
    n = len(nodes) + 1
    linked = np.eye(n, dtype=bool)
    if n == 1:
        return linked
    if params is None:
        if link_all_fallback:
            return np.ones((n, n), dtype=bool)
        raise ValueError("link_nodes needs params unless link_all_fallback is set")
    toks = [node_tokens(query, params)] + [node_tokens(r, params) for r in nodes]
    ia, ib = np.triu_indices(n, k=1)
    fwd = predict_link_batch([toks[i] for i in ia], [toks[j] for j in ib], params)
    rev = predict_link_batch([toks[j] for j in ib], [toks[i] for i in ia], params)
    hit = (fwd >= 0.5) | (rev >= 0.5)
    linked[ia, ib] = hit
    linked[ib, ia] = hit
    return linked


def train_trajectory(pairs, config=None, seed=0):
    """Fit predictor params on labeled sighting-window pairs.

    pairs: iterable of (sightings_a, sightings_b, label) with label 1
    for same-trajectory. Adam at the configured rate, shuffled
    mini-batches, fixed epoch count; returns (params, per-epoch mean
    loss history). Same seed, same corpus -> bitwise-equal params.
    """
    config = config or TrajectoryConfig()
    pairs = list(pairs)
    if len(pairs) < config.batch_size:
        raise ValueError(
            f"corpus has {len(pairs)} pairs; need at least one full batch of {config.batch_size}"
        )
    rng = np.random.default_rng(seed)
    params = TrajectoryParams.init(config, rng)
    learned = config.time_embedding == "learned"
    # geometry lanes never change during training; the learned table
    # does, so tokens are cached as geometry + bucket indices and the
    # table rows are added per batch
    sights_a = [_sightings_of(a) for a, _, _ in pairs]
    sights_b = [_sightings_of(b) for _, b, _ in pairs]
    geo_a = [_token_geometry(s, params) for s in sights_a]
    geo_b = [_token_geometry(s, params) for s in sights_b]
    times_a = [_token_times(s) for s in sights_a]
    times_b = [_token_times(s) for s in sights_b]
    if not learned:
        geo_a = [g + temporal_embedding(t, params) for g, t in zip(geo_a, times_a)]
        geo_b = [g + temporal_embedding(t, params) for g, t in zip(geo_b, times_b)]
    labels = np.array([y for _, _, y in pairs], dtype=np.float64)
    opt = Adam(params.trainable(), lr=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(pairs), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            ta, ma = _pad_stack([geo_a[i] for i in idx])
            tb, mb = _pad_stack([geo_b[i] for i in idx])
            if learned:
                ba = _padded_buckets([times_a[i] for i in idx], ta.shape[1], config.time_buckets)
                bb = _padded_buckets([times_b[i] for i in idx], tb.shape[1], config.time_buckets)
                ta = ta + params.time_table[ba] * ma[:, :, None]
                tb = tb + params.time_table[bb] * mb[:, :, None]
                loss, grads = loss_and_grads(params, ta, ma, tb, mb, labels[idx], ba, bb)
            else:
                loss, grads = loss_and_grads(params, ta, ma, tb, mb, labels[idx])
            opt.step(grads)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / n_batches)
    return params, history
