"""Few-shot graph neural network with a learned adjacency and explicit backward.

Node order inside every graph is ``support..., query, unlabeled...``. All
batched routines take node features of shape ``(B, n, d)``; each episode is an
independent graph.
"""

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .losses import SoftmaxHead
from .tensor import ShapeError, softmax_rows


@dataclass
class GnnParams:
    adjacency_mlps: list          # one EncoderParams (d_l -> ... -> 1) per adjacency evaluation
    proj_adj: list                # theta for the learned operator, d_l x d_{l+1}
    proj_ones: list               # theta for the (1/n) all-ones operator
    head: SoftmaxHead
    per_layer_adjacency: bool = True
    normalize_adjacency: bool = True
    leaky_slope: float = 0.2

    def __post_init__(self):
        if len(self.proj_adj) < 1 or len(self.proj_adj) != len(self.proj_ones):
            raise ShapeError("need matching projection lists with at least one layer")
        for l, (a, o) in enumerate(zip(self.proj_adj, self.proj_ones)):
            if a.shape != o.shape:
                raise ShapeError(f"layer {l}: operator projections differ in shape")
            if l and a.shape[0] != self.proj_adj[l - 1].shape[1]:
                raise ShapeError(f"layer {l}: projection input {a.shape[0]} breaks the chain")
        if self.head.weights.shape[0] != self.proj_adj[-1].shape[1]:
            raise ShapeError("head input width must equal the last layer width")
        want = self.n_layers if self.per_layer_adjacency else 1
        if len(self.adjacency_mlps) != want:
            raise ShapeError(f"expected {want} adjacency networks, got {len(self.adjacency_mlps)}")

    @property
    def n_layers(self):
        return len(self.proj_adj)

    @property
    def widths(self):
        return [self.proj_adj[0].shape[0]] + [p.shape[1] for p in self.proj_adj]

    def arrays(self):
        out = []
        for mlp in self.adjacency_mlps:
            out.extend(mlp.arrays())
        out.extend(self.proj_adj)
        out.extend(self.proj_ones)
        out.extend([self.head.weights, self.head.bias])
        return out

    def with_arrays(self, arrays):
        arrays = list(arrays)
        mlps = []
        pos = 0
        for mlp in self.adjacency_mlps:
            k = len(mlp.arrays())
            mlps.append(mlp.with_arrays(arrays[pos:pos + k]))
            pos += k
        m = self.n_layers
        proj_adj = arrays[pos:pos + m]
        proj_ones = arrays[pos + m:pos + 2 * m]
        w, b = arrays[pos + 2 * m:pos + 2 * m + 2]
        return GnnParams(mlps, proj_adj, proj_ones, SoftmaxHead(w, b),
                         self.per_layer_adjacency, self.normalize_adjacency, self.leaky_slope)

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def to_dict(self):
        return {
            "adjacency_mlps": [m.to_dict() for m in self.adjacency_mlps],
            "proj_adj": [p.tolist() for p in self.proj_adj],
            "proj_ones": [p.tolist() for p in self.proj_ones],
            "head_weights": self.head.weights.tolist(),
            "head_bias": self.head.bias.tolist(),
            "per_layer_adjacency": self.per_layer_adjacency,
            "normalize_adjacency": self.normalize_adjacency,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [enc.EncoderParams.from_dict(m) for m in d["adjacency_mlps"]],
            [np.asarray(p, dtype=np.float64) for p in d["proj_adj"]],
            [np.asarray(p, dtype=np.float64) for p in d["proj_ones"]],
            SoftmaxHead(np.asarray(d["head_weights"]), np.asarray(d["head_bias"])),
            d.get("per_layer_adjacency", True), d.get("normalize_adjacency", True),
            d.get("leaky_slope", 0.2),
        )


def init_params(in_width, layer_widths, n_classes, seed, adjacency_hidden=(16,),
                adjacency_activation="tanh", per_layer_adjacency=True,
                normalize_adjacency=True, leaky_slope=0.2):
    """Glorot-uniform projections and head; ``in_width`` is encoder dim + C."""
    rng = np.random.default_rng(seed)
    widths = [in_width] + list(layer_widths)

    def glorot(i, o):
        lim = np.sqrt(6.0 / (i + o))
        return rng.uniform(-lim, lim, size=(i, o))

    n_adj = len(layer_widths) if per_layer_adjacency else 1
    mlps = []
    for l in range(n_adj):
        spec = enc.EncoderSpec((widths[l], *adjacency_hidden, 1), adjacency_activation)
        mlps.append(enc.init(spec, int(rng.integers(2**31))))
    proj_adj = [glorot(i, o) for i, o in zip(widths[:-1], widths[1:])]
    proj_ones = [glorot(i, o) for i, o in zip(widths[:-1], widths[1:])]
    head = SoftmaxHead(glorot(widths[-1], n_classes))
    return GnnParams(mlps, proj_adj, proj_ones, head,
                     per_layer_adjacency, normalize_adjacency, leaky_slope)


def label_blocks(support_labels, n_query, n_unlabeled, n_classes):
    """One-hot rows for support nodes, uniform 1/C rows for query/unlabeled nodes."""
    s = len(support_labels)
    block = np.full((s + n_query + n_unlabeled, n_classes), 1.0 / n_classes)
    block[:s] = 0.0
    block[np.arange(s), np.asarray(support_labels, dtype=np.int64)] = 1.0
    return block


def init_node_features(embeddings, episode):
    """Concatenate encoder embeddings (support, query, unlabeled order) with label blocks."""
    if len(episode.query_y) != 1:
        raise ValueError(f"graph episodes take exactly one query, got {len(episode.query_y)}")
    n = len(episode.support_y) + 1 + len(episode.unlabeled_x)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != n:
        raise ShapeError(f"expected {n} node embeddings, got {embeddings.shape[0]}")
    block = label_blocks(episode.support_y, 1, len(episode.unlabeled_x), episode.c_way)
    return np.hstack([embeddings, block])


def episode_nodes(episode):
    return np.vstack([episode.support_x, episode.query_x, episode.unlabeled_x])


@dataclass
class AdjacencyCache:
    sign: np.ndarray
    mlp_cache: object
    adj: np.ndarray
    normalized: bool


def adjacency_forward(x, mlp, normalize=True):
    """Batched learned adjacency; returns (A, cache) with A of shape (B, n, n)."""
    b, n, d = x.shape
    delta = x[:, :, None, :] - x[:, None, :, :]
    scores, mlp_cache = enc.forward(mlp, np.abs(delta).reshape(-1, d))
    raw = scores.reshape(b, n, n)
    adj = softmax_rows(raw) if normalize else raw
    return adj, AdjacencyCache(np.sign(delta), mlp_cache, adj, normalize)


def adjacency_backward(mlp, cache, grad_adj):
    """Returns (grad_mlp_params, grad_x)."""
    if cache.normalized:
        a = cache.adj
        grad_raw = a * (grad_adj - np.sum(grad_adj * a, axis=-1, keepdims=True))
    else:
        grad_raw = grad_adj
    g_mlp, g_abs = enc.backward(mlp, cache.mlp_cache, grad_raw.reshape(-1, 1))
    p = g_abs.reshape(cache.sign.shape) * cache.sign
    return g_mlp, p.sum(axis=2) - p.sum(axis=1)


def adjacency(x, adjacency_mlp, normalize=True):
    """Learned adjacency of one graph: MLP(|x_i - x_j|), row-softmax normalized."""
    a, _ = adjacency_forward(np.asarray(x, dtype=np.float64)[None], adjacency_mlp, normalize)
    return a[0]


def raw_scores(x, adjacency_mlp):
    a, _ = adjacency_forward(np.asarray(x, dtype=np.float64)[None], adjacency_mlp, False)
    return a[0]


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def gnn_layer(x, adj, proj_adj, proj_ones, slope=None):
    """sigma(A X theta_A + (1/n) 1 X theta_1); identity when ``slope`` is None.

    Works on a single graph (n, d) or a batch (B, n, d).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj_adj.shape[0]:
        raise ShapeError(f"features width {x.shape[-1]} != projection input {proj_adj.shape[0]}")
    if adj.shape[-1] != x.shape[-2]:
        raise ShapeError("adjacency and feature node counts differ")
    z = (adj @ x) @ proj_adj + x.mean(axis=-2, keepdims=True) @ proj_ones
    return z if slope is None else _leaky(z, slope)


@dataclass
class GnnCache:
    feats: list = field(default_factory=list)     # X^(l) for l = 0..M
    adjs: list = field(default_factory=list)      # (A, AdjacencyCache) per adjacency evaluation
    preacts: list = field(default_factory=list)
    query_index: int = 0


def gnn_forward_batch(x0, params, query_index):
    """Propagate node features; returns (query_logits (B, C), X^(M), cache)."""
    cache = GnnCache(query_index=query_index)
    x = x0
    m = params.n_layers
    adj = None
    for l in range(m):
        cache.feats.append(x)
        if l == 0 or params.per_layer_adjacency:
            adj, a_cache = adjacency_forward(x, params.adjacency_mlps[l if params.per_layer_adjacency else 0],
                                             params.normalize_adjacency)
            cache.adjs.append(a_cache)
        z = gnn_layer(x, adj, params.proj_adj[l], params.proj_ones[l])
        cache.preacts.append(z)
        x = z if l == m - 1 else _leaky(z, params.leaky_slope)
    cache.feats.append(x)
    logits = params.head.logits(x[:, query_index, :])
    return logits, x, cache


def gnn_backward_batch(params, cache, grad_logits=None, grad_final=None):
    """Reverse pass; returns (GnnParams-shaped gradients, grad wrt X^(0))."""
    x_m = cache.feats[-1]
    g = np.zeros_like(x_m) if grad_final is None else np.array(grad_final, dtype=np.float64)
    g_head_w = np.zeros_like(params.head.weights)
    g_head_b = np.zeros_like(params.head.bias)
    if grad_logits is not None:
        q = x_m[:, cache.query_index, :]
        g_head_w = q.T @ grad_logits
        g_head_b = grad_logits.sum(axis=0)
        g[:, cache.query_index, :] += grad_logits @ params.head.weights.T

    m = params.n_layers
    g_adj_proj = [None] * m
    g_one_proj = [None] * m
    g_mlps = [None] * len(params.adjacency_mlps)
    g_adj_static = None
    for l in range(m - 1, -1, -1):
        x = cache.feats[l]
        z = cache.preacts[l]
        a_cache = cache.adjs[l if params.per_layer_adjacency else 0]
        adj = a_cache.adj
        if l != m - 1:
            g = g * np.where(z > 0, 1.0, params.leaky_slope)
        ax = adj @ x
        mean = x.mean(axis=1)                             # (B, d)
        g_sum = g.sum(axis=1)                             # (B, d')
        g_adj_proj[l] = np.einsum("bnd,bne->de", ax, g)
        g_one_proj[l] = mean.T @ g_sum
        g_ax = g @ params.proj_adj[l].T
        g_x = adj.transpose(0, 2, 1) @ g_ax + (g_sum @ params.proj_ones[l].T)[:, None, :] / x.shape[1]
        g_a = g_ax @ x.transpose(0, 2, 1)
        if params.per_layer_adjacency:
            g_mlps[l], g_xa = adjacency_backward(params.adjacency_mlps[l], a_cache, g_a)
            g_x = g_x + g_xa
        else:
            g_adj_static = g_a if g_adj_static is None else g_adj_static + g_a
        g = g_x
    if not params.per_layer_adjacency:
        g_mlps[0], g_xa = adjacency_backward(params.adjacency_mlps[0], cache.adjs[0], g_adj_static)
        g = g + g_xa
    grads = GnnParams(g_mlps, g_adj_proj, g_one_proj, SoftmaxHead(g_head_w, g_head_b),
                      params.per_layer_adjacency, params.normalize_adjacency, params.leaky_slope)
    return grads, g


@dataclass
class GraphBatch:
    """Stacked single-query graphs sharing one node layout."""

    raw: np.ndarray          # (B, n, d_in)
    labels: np.ndarray       # (B, n_support) episode labels of the support nodes
    query_labels: np.ndarray  # (B,)
    blocks: np.ndarray       # (B, n, C)
    n_classes: int

    @property
    def query_index(self):
        return self.labels.shape[1]

    @property
    def n_nodes(self):
        return self.raw.shape[1]


def make_batch(episodes):
    """Stack single-query episodes of identical shape into one batch."""
    if any(len(ep.query_y) != 1 for ep in episodes):
        raise ValueError("graph episodes take exactly one query")
    c = episodes[0].c_way
    raw = np.stack([episode_nodes(ep) for ep in episodes])
    labels = np.stack([ep.support_y for ep in episodes])
    blocks = np.stack([label_blocks(ep.support_y, 1, len(ep.unlabeled_x), c) for ep in episodes])
    qlab = np.array([ep.query_y[0] for ep in episodes])
    return GraphBatch(raw, labels, qlab, blocks, c)


def forward_batch(batch, encoder_params, params):
    """Encoder + graph propagation for a batch; returns (logits, X^(M), caches)."""
    b, n, d_in = batch.raw.shape
    emb, enc_cache = enc.forward(encoder_params, batch.raw.reshape(b * n, d_in))
    x0 = np.concatenate([emb.reshape(b, n, -1), batch.blocks], axis=2)
    logits, x_m, cache = gnn_forward_batch(x0, params, batch.query_index)
    return logits, x_m, (enc_cache, cache)


def backward_batch(batch, encoder_params, params, caches, grad_logits=None, grad_final=None):
    """Returns (encoder grads, gnn grads)."""
    enc_cache, cache = caches
    g_params, g_x0 = gnn_backward_batch(params, cache, grad_logits, grad_final)
    b, n, _ = batch.raw.shape
    d_enc = encoder_params.spec.out_dim
    g_enc, _ = enc.backward(encoder_params, enc_cache, g_x0[:, :, :d_enc].reshape(b * n, d_enc))
    return g_enc, g_params


def gnn_forward(episode, encoder_params, params):
    """Single episode: (query logits of length C, final node embeddings X^(M))."""
    logits, x_m, _ = forward_batch(make_batch([episode]), encoder_params, params)
    return logits[0], x_m[0]
