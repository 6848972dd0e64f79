"""Graph encoder that projects local-graph node features to a separable space.

Three convolution layers, each concatenating a node's own features
with its degree-scaled neighborhood aggregate before a linear map:

    X_{l+1} = act([X_l | L^{-1/2} A L^{-1/2} X_l] W_l)

trained with a pull-together/push-apart loss over labeled graphs.
Forward, loss, and the full backward pass are hand-written numpy.
"""

import math
from dataclasses import dataclass

import numpy as np

from .netutil import Adam, glorot

_NORM_FLOOR = 1e-12


@dataclass
class GcnConfig:
    layer_dims: tuple = (256, 128, 64)
    margin: float = 0.5
    learning_rate: float = 0.01
    max_epochs: int = 120
    patience: int = 10
    # "cosine" trains on distance 1 - cos so the loss pulls same-label
    # nodes together; "similarity" keeps D = cos for comparison runs,
    # even though minimizing it drives positives apart
    distance: str = "cosine"
    val_fraction: float = 0.2
    # Spin every training graph's features by a fresh random rotation
    # each epoch. Grouping only depends on relative angles and the
    # adjacency, so this stops the net from memorizing the absolute
    # feature directions of the training identities. Validation runs
    # on unrotated graphs.
    rotate_augment: bool = True

    def __post_init__(self):
        if self.distance not in ("cosine", "similarity"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if len(self.layer_dims) != 3:
            raise ValueError("expected exactly three convolution layers")


@dataclass
class GcnParams:
    weights: list  # W_l of shape (2*d_l, d_{l+1})

    @property
    def dims(self):
        return [self.weights[0].shape[0] // 2] + [w.shape[1] for w in self.weights]

    def copy(self):
        return GcnParams(weights=[w.copy() for w in self.weights])

    @classmethod
    def init(cls, d_in, config, rng):
        dims = [d_in] + list(config.layer_dims)
        return cls(weights=[glorot(rng, (2 * dims[i], dims[i + 1])) for i in range(3)])


@dataclass
class GcnOutput:
    embeddings: np.ndarray
    unit_embeddings: np.ndarray


def aggregation_operator(adjacency):
    """Degree-scaled symmetric aggregation matrix.

    The row-normalized adjacency is re-symmetrized as (A + A^T)/2
    first; zero-degree rows get scale 0 instead of a division error.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    a = 0.5 * (a + a.T)
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return a * dinv[:, None] * dinv[None, :]


def _forward_arrays(features, adjacency, params, want_cache=False):
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != params.dims[0]:
        raise ValueError(
            f"feature dim {x.shape[1]} does not match network input dim {params.dims[0]}"
        )
    ahat = aggregation_operator(adjacency)
    cache = []
    n_layers = len(params.weights)
    for l, w in enumerate(params.weights):
        concat = np.concatenate([x, ahat @ x], axis=1)
        pre = concat @ w
        out = np.maximum(pre, 0.0) if l < n_layers - 1 else pre
        cache.append((x, concat, pre))
        x = out
    if want_cache:
        return x, ahat, cache
    return x


def _unit_rows(x):
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _NORM_FLOOR)
    return x / norms, norms


def gcn_forward(graph, params):
    """Embed a CrowdedSubGraph (or raw (features, adjacency))."""
    if hasattr(graph, "features"):
        feats, adj = graph.features, graph.adjacency
    else:
        feats, adj = graph
    emb = _forward_arrays(feats, adj, params)
    unit, _ = _unit_rows(emb)
    return GcnOutput(embeddings=emb, unit_embeddings=unit)


def _pair_distance_matrix(unit_emb, distance):
    gram = unit_emb @ unit_emb.T
    return (1.0 - gram) if distance == "cosine" else gram


def _logsumexp(vals):
    m = vals.max()
    return m + math.log(np.exp(vals - m).sum())


def gcn_loss(output, labels, margin=0.5, distance="cosine"):
    """Anchor loss: sum of hinged (positive LSE + negative LSE) terms.

    Anchors whose identity has no second node still matter: a query
    whose record fell outside the picked neighborhood must not land
    near a stranger, so such anchors keep a push-only term
    max(0, LSE(margin - d_neg) - log(n_neg)) that zeroes once every
    negative clears the margin. Anchors with no cross-identity node
    contribute nothing. If every anchor drops out the loss is
    undefined.
    """
    labels = np.asarray(labels)
    d = _pair_distance_matrix(output.unit_embeddings, distance)
    n = labels.shape[0]
    total = 0.0
    usable = 0
    for i in range(n):
        same = labels == labels[i]
        pos = same.copy()
        pos[i] = False
        neg = ~same
        if not neg.any():
            continue
        usable += 1
        if pos.any():
            arg = _logsumexp(d[i, pos]) + _logsumexp(margin - d[i, neg])
        else:
            arg = _logsumexp(margin - d[i, neg]) - math.log(neg.sum())
        total += max(arg, 0.0)
    if usable == 0:
        raise ValueError("loss undefined: every anchor lacks a cross-identity node")
    return total


def _loss_grad_embeddings(emb, labels, margin, distance):
    """Loss value and its gradient w.r.t. raw (pre-normalization) embeddings."""
    labels = np.asarray(labels)
    unit, norms = _unit_rows(emb)
    d = _pair_distance_matrix(unit, distance)
    n = labels.shape[0]
    g_pairs = np.zeros((n, n))
    total = 0.0
    usable = 0
    for i in range(n):
        same = labels == labels[i]
        pos = same.copy()
        pos[i] = False
        neg = ~same
        if not neg.any():
            continue
        usable += 1
        neg_vals = margin - d[i, neg]
        if pos.any():
            pos_vals = d[i, pos]
            arg = _logsumexp(pos_vals) + _logsumexp(neg_vals)
        else:
            pos_vals = None
            arg = _logsumexp(neg_vals) - math.log(neg.sum())
        if arg <= 0.0:
            continue
        total += arg
        if pos_vals is not None:
            sp = np.exp(pos_vals - pos_vals.max())
            sp /= sp.sum()
            g_pairs[i, pos] += sp
        sn = np.exp(neg_vals - neg_vals.max())
        sn /= sn.sum()
        g_pairs[i, neg] -= sn
    if usable == 0:
        raise ValueError("loss undefined: every anchor lacks a cross-identity node")
    sign = -1.0 if distance == "cosine" else 1.0
    d_unit = sign * ((g_pairs + g_pairs.T) @ unit)
    # through the row normalization: project out the radial component
    d_emb = (d_unit - (d_unit * unit).sum(axis=1, keepdims=True) * unit) / norms
    return total, d_emb


def gcn_loss_and_grads(features, adjacency, labels, params, margin=0.5, distance="cosine"):
    """Loss and analytic gradients for every layer weight matrix."""
    emb, ahat, cache = _forward_arrays(features, adjacency, params, want_cache=True)
    loss, d_x = _loss_grad_embeddings(emb, labels, margin, distance)
    grads = [None] * len(params.weights)
    n_layers = len(params.weights)
    for l in range(n_layers - 1, -1, -1):
        x_in, concat, pre = cache[l]
        d_pre = d_x if l == n_layers - 1 else d_x * (pre > 0.0)
        grads[l] = concat.T @ d_pre
        d_concat = d_pre @ params.weights[l].T
        d_own, d_agg = d_concat[:, : x_in.shape[1]], d_concat[:, x_in.shape[1] :]
        d_x = d_own + ahat.T @ d_agg
    return loss, grads


def _random_rotation(dim, rng):
    """Haar-distributed orthogonal matrix (QR of a gaussian, sign-fixed)."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _graph_loss(graph, params, margin, distance):
    feats, adj, labels = graph
    out = gcn_forward((feats, adj), params)
    return gcn_loss(out, labels, margin=margin, distance=distance)


def train_gcn(corpus, config=None, seed=0, val_corpus=None):
    """Fit layer weights on labeled graphs (features, adjacency, labels).

    Adam at the configured rate, one step per graph in shuffled order,
    early stopping on the validation loss with the configured patience,
    returning the best-validation parameters. When no validation split
    is supplied the corpus tail is held out by shuffled index; callers
    wanting a leakage-free per-identity split should pass val_corpus
    built that way.
    """
    config = config or GcnConfig()
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty graph corpus")
    rng = np.random.default_rng(seed)
    if val_corpus is None:
        order = rng.permutation(len(corpus))
        n_val = max(1, int(round(config.val_fraction * len(corpus))))
        if len(corpus) > 1:
            val_corpus = [corpus[i] for i in order[:n_val]]
            corpus = [corpus[i] for i in order[n_val:]]
        else:
            val_corpus = list(corpus)
    d_in = corpus[0][0].shape[1]
    params = GcnParams.init(d_in, config, rng)
    opt = Adam(params.weights, lr=config.learning_rate)
    history = {"train": [], "val": []}

    def val_loss(p):
        vals = []
        for g in val_corpus:
            try:
                vals.append(_graph_loss(g, p, config.margin, config.distance))
            except ValueError:
                continue
        if not vals:
            raise ValueError("loss undefined on every validation graph")
        return float(np.mean(vals))

    best = params.copy()
    best_val = val_loss(params)
    history["val"].append(best_val)
    stale = 0
    for _ in range(config.max_epochs):
        order = rng.permutation(len(corpus))
        epoch = []
        for gi in order:
            feats, adj, labels = corpus[gi]
            if config.rotate_augment:
                feats = feats @ _random_rotation(feats.shape[1], rng)
            try:
                loss, grads = gcn_loss_and_grads(
                    feats, adj, labels, params, config.margin, config.distance
                )
            except ValueError:
                continue
            opt.step(grads)
            epoch.append(loss)
        history["train"].append(float(np.mean(epoch)) if epoch else 0.0)
        v = val_loss(params)
        history["val"].append(v)
        if v < best_val - 1e-12:
            best_val = v
            best = params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, history
