"""Episodic training of PN / GNN models with an optional large-margin term."""

import csv
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from . import gnn as gnn_mod
from .config import TrainConfig
from .data import EpisodeSpec, check_disjoint, sample_episode
from .losses import (EMBEDDING_KINDS, NORMALIZED_KINDS, LossOut, arcface_loss, cosface_loss,
                     head_softmax_ce, large_margin_loss, scaled_cosine_softmax, total_loss)
from .protonet import pn_logits, pn_loss, prototypes
from .tensor import l2_normalize
from .triplets import contrastive_pairs, select_triplets_gnn, select_triplets_pn

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, update, what="loss"):
        super().__init__(f"training diverged at update {update}: non-finite {what}")
        self.update = update


# ----------------------------------------------------------------------------
# optimizers

class SGD:
    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    """Adam with bias-corrected moment estimates; updates arrays in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(cfg):
    if cfg.name == "sgd":
        return SGD(cfg.lr)
    return Adam(cfg.lr, cfg.betas[0], cfg.betas[1], cfg.eps)


def clip_global_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ----------------------------------------------------------------------------
# model container

@dataclass
class FewShotModel:
    kind: str                      # "pn" or "gnn"
    encoder: enc.EncoderParams
    gnn: gnn_mod.GnnParams = None
    metric: str = "euclidean"
    scale: float = 10.0
    cosine_head: bool = False

    def arrays(self):
        out = self.encoder.arrays()
        if self.gnn is not None:
            out = out + self.gnn.arrays()
        return out

    def copy(self):
        return replace(self, encoder=self.encoder.copy(),
                       gnn=None if self.gnn is None else self.gnn.copy())

    @property
    def n_way(self):
        return None if self.gnn is None else self.gnn.head.n_classes

    def to_dict(self):
        return {"kind": self.kind, "encoder": self.encoder.to_dict(),
                "gnn": None if self.gnn is None else self.gnn.to_dict(),
                "metric": self.metric, "scale": self.scale, "cosine_head": self.cosine_head}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], enc.EncoderParams.from_dict(d["encoder"]),
                   None if d.get("gnn") is None else gnn_mod.GnnParams.from_dict(d["gnn"]),
                   d.get("metric", "euclidean"), d.get("scale", 10.0), d.get("cosine_head", False))

    def predict(self, episode):
        """Predicted episode labels for every query row."""
        if self.kind == "pn":
            s, _ = enc.forward(self.encoder, episode.support_x)
            q, _ = enc.forward(self.encoder, episode.query_x)
            protos = prototypes(s, episode.support_y, self.metric, self.scale, episode.c_way)
            return pn_logits(q, protos).argmax(axis=1)
        if episode.c_way != self.n_way:
            raise ValueError(f"model is {self.n_way}-way, episode is {episode.c_way}-way")
        batch = gnn_mod.make_batch([episode.with_single_query(j) for j in range(len(episode.query_y))])
        logits, x_m, _ = gnn_mod.forward_batch(batch, self.encoder, self.gnn)
        if self.cosine_head:
            q, _ = l2_normalize(x_m[:, batch.query_index, :])
            w, _ = l2_normalize(self.gnn.head.weights.T)
            logits = q @ w.T
        return logits.argmax(axis=1)


def build_model(cfg, in_dim, seed):
    rng = np.random.default_rng(seed)
    e = cfg.encoder
    spec = enc.EncoderSpec((in_dim, *e.hidden, e.embedding_dim), e.activation)
    encoder = enc.init(spec, int(rng.integers(2**31)))
    cosine = cfg.loss.kind in NORMALIZED_KINDS
    if cfg.model == "pn":
        return FewShotModel("pn", encoder, None, cfg.metric, cfg.loss.scale, False)
    g = cfg.gnn
    params = gnn_mod.init_params(e.embedding_dim + cfg.episode.c_way, g.layer_widths,
                                 cfg.episode.c_way, int(rng.integers(2**31)),
                                 g.adjacency_hidden, g.adjacency_activation,
                                 g.per_layer_adjacency, g.normalize_adjacency, g.leaky_slope)
    return FewShotModel("gnn", encoder, params, cfg.metric, cfg.loss.scale, cosine)


# ----------------------------------------------------------------------------
# margin heuristic

def margin_heuristic(embeddings, n_b):
    """Half the mean L2 norm of the batch embeddings."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if n_b < 1 or embeddings.shape[0] == 0:
        raise ValueError("margin heuristic needs a non-empty batch")
    if embeddings.shape[0] != n_b:
        raise ValueError(f"n_b={n_b} but batch has {embeddings.shape[0]} rows")
    return float(np.linalg.norm(embeddings, axis=1).sum() / (2.0 * n_b))


# ----------------------------------------------------------------------------
# history

@dataclass
class EvalRecord:
    update: int
    loss: float
    val_acc: float
    ci95: float
    margin: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def add(self, rec):
        if self.records and rec.update <= self.records[-1].update:
            raise ValueError("history updates must increase")
        self.records.append(rec)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["update", "loss", "val_acc", "ci95", "margin"])
            for r in self.records:
                w.writerow([r.update, repr(r.loss), repr(r.val_acc), repr(r.ci95), repr(r.margin)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EvalRecord(int(r["update"]), float(r["loss"]), float(r["val_acc"]),
                               float(r["ci95"]), float(r["margin"])) for r in rows])


# ----------------------------------------------------------------------------
# one update

@dataclass
class _State:
    margin: float = None
    triplets: dict = field(default_factory=dict)
    pairs: dict = field(default_factory=dict)


def _uses_margin_term(cfg):
    return cfg.loss.kind in EMBEDDING_KINDS or cfg.loss.kind == "normface"


def _resolve_margin(cfg, state, emb):
    if state.margin is not None:
        return state.margin
    m = cfg.loss.margin
    if cfg.margin_mode == "heuristic" and cfg.loss.kind not in ("cosface", "arcface"):
        basis = l2_normalize(emb)[0] if cfg.loss.kind in NORMALIZED_KINDS else emb
        h = margin_heuristic(basis, basis.shape[0])
        if h > 0 and np.isfinite(h):
            m = h
        else:
            log.warning("margin heuristic gave %r; falling back to margin=%g", h, m)
    state.margin = m
    return m


def _cached_triplets(cfg, state, key, select):
    if key not in state.triplets:
        ts = select()
        state.triplets[key] = ts
        state.pairs[key] = contrastive_pairs(ts)
    return state.triplets[key], state.pairs[key]


def pn_step(model, cfg, episode, state, trip_rng):
    """Loss value and gradients (aligned with ``model.arrays()``) for one PN episode."""
    x = np.vstack([episode.support_x, episode.query_x])
    emb, cache = enc.forward(model.encoder, x)
    out = pn_loss(emb, episode.support_y, episode.query_y, model.metric, model.scale)
    if _uses_margin_term(cfg):
        labels = np.concatenate([episode.support_y, episode.query_y])
        m = _resolve_margin(cfg, state, emb)
        key = ("pn", len(episode.support_y), len(episode.query_y))
        ts, pairs = _cached_triplets(cfg, state, key,
                                     lambda: select_triplets_pn(labels, cfg.n_pos, cfg.n_neg, trip_rng))
        extra = large_margin_loss(cfg.loss.kind, emb, labels, m, triplets=ts, pairs=pairs)
        out = total_loss(out, extra, cfg.loss.lam)
    g_enc, _ = enc.backward(model.encoder, cache, out.grad_embeddings)
    return out.value, g_enc.arrays()


def _scatter(rows, n_rows, grad):
    full = np.zeros((n_rows, grad.shape[1]))
    full[rows] = grad
    return full


def gnn_step(model, cfg, batch, state, trip_rng):
    """Loss value and gradients for one batch of single-query graphs."""
    params = model.gnn
    logits, x_m, caches = gnn_mod.forward_batch(batch, model.encoder, params)
    b, n, d = x_m.shape
    flat = x_m.reshape(b * n, d)
    s = batch.query_index
    q_rows = np.arange(b) * n + s
    q = flat[q_rows]
    kind = cfg.loss.kind
    head = params.head
    if kind == "cosface":
        cls = cosface_loss(q, head, batch.query_labels, cfg.loss.scale, cfg.loss.margin)
    elif kind == "arcface":
        cls = arcface_loss(q, head, batch.query_labels, cfg.loss.scale, cfg.loss.margin)
    elif model.cosine_head:
        cls = scaled_cosine_softmax(q, head, batch.query_labels, cfg.loss.scale)
    else:
        cls = head_softmax_ce(q, head, batch.query_labels)
    cls = LossOut(cls.value, _scatter(q_rows, b * n, cls.grad_embeddings), cls.grad_weights, cls.grad_bias)

    out = cls
    if _uses_margin_term(cfg):
        labels = np.full((b, n), -1, dtype=np.int64)
        labels[:, :s] = batch.labels
        labels[:, s] = batch.query_labels
        labels = labels.ravel()
        m = _resolve_margin(cfg, state, flat)
        if kind == "normface":
            rows = np.flatnonzero(labels >= 0)
            nf = large_margin_loss(kind, flat[rows], labels[rows], m, head=head)
            extra = LossOut(nf.value, _scatter(rows, b * n, nf.grad_embeddings), nf.grad_weights)
        else:
            key = ("gnn", b, n, tuple(batch.labels[0]))
            ts, pairs = _cached_triplets(
                cfg, state, key,
                lambda: select_triplets_gnn(batch.labels, cfg.n_pos, cfg.n_neg, trip_rng, stride=n))
            extra = large_margin_loss(kind, flat, labels, m, triplets=ts, pairs=pairs)
        out = total_loss(cls, extra, cfg.loss.lam)

    g_enc, g_gnn = gnn_mod.backward_batch(batch, model.encoder, params, caches,
                                          grad_final=out.grad_embeddings.reshape(b, n, d))
    g_w = out.grad_weights if out.grad_weights.size else np.zeros_like(head.weights)
    g_b = out.grad_bias if out.grad_bias.size else np.zeros_like(head.bias)
    g_gnn.head.weights[...] = g_w
    g_gnn.head.bias[...] = g_b
    return out.value, g_enc.arrays() + g_gnn.arrays()


def sample_graph_batch(ds, cfg, rng):
    spec = EpisodeSpec(cfg.episode.c_way, cfg.episode.k_shot, 1, cfg.episode.n_unlabeled)
    eps = []
    for _ in range(cfg.batch_episodes):
        ep = sample_episode(ds, spec, rng)
        eps.append(ep.with_single_query(int(rng.integers(spec.c_way))))
    return gnn_mod.make_batch(eps)


# ----------------------------------------------------------------------------
# evaluation and the training loop

def evaluate(model, dataset, spec, n_episodes, seed):
    """Mean query accuracy over episodes and its 95% half-width."""
    rng = np.random.default_rng(seed)
    accs = np.empty(n_episodes)
    for i in range(n_episodes):
        ep = sample_episode(dataset, spec, rng)
        accs[i] = np.mean(model.predict(ep) == ep.query_y)
    mean = float(accs.mean())
    if n_episodes < 2:
        return mean, float("nan")
    if np.ptp(accs) == 0:
        return mean, 0.0
    return mean, float(1.96 * accs.std(ddof=1) / np.sqrt(n_episodes))


def train_episodic(cfg, splits, callback=None):
    """Train on ``splits['train']``; validation accuracy on ``splits['val']``.

    ``splits`` maps split names to Datasets whose class ids are disjoint.
    Returns (model, history). Raises TrainingDivergence on a non-finite loss,
    gradient or parameter.
    """
    if not isinstance(cfg, TrainConfig):
        raise TypeError("cfg must be a TrainConfig")
    check_disjoint({k: v.classes for k, v in splits.items()})
    train_ds = splits["train"]
    val_ds = splits.get("val")
    ss = np.random.SeedSequence(cfg.seed)
    init_seed, ep_seed, trip_seed, eval_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    model = build_model(cfg, train_ds.dim, init_seed)
    ep_rng = np.random.default_rng(ep_seed)
    trip_rng = np.random.default_rng(trip_seed)
    opt = make_optimizer(cfg.optimizer)
    state = _State()
    history = TrainHistory()

    for t in range(1, cfg.n_updates + 1):
        if cfg.model == "pn":
            ep = sample_episode(train_ds, cfg.episode, ep_rng)
            value, grads = pn_step(model, cfg, ep, state, trip_rng)
        else:
            batch = sample_graph_batch(train_ds, cfg, ep_rng)
            value, grads = gnn_step(model, cfg, batch, state, trip_rng)
        if not np.isfinite(value):
            raise TrainingDivergence(t, "loss")
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergence(t, "gradient")
        clip_global_norm(grads, cfg.clip_norm)
        opt.step(model.arrays(), grads)
        if not all(np.all(np.isfinite(p)) for p in model.arrays()):
            raise TrainingDivergence(t, "parameter")
        if t % cfg.eval_every == 0 or t == cfg.n_updates:
            if val_ds is not None:
                acc, ci = evaluate(model, val_ds, cfg.episode, cfg.eval_episodes, eval_seed)
            else:
                acc, ci = float("nan"), float("nan")
            margin = state.margin
            if margin is None:
                margin = cfg.loss.margin if cfg.loss.kind in ("cosface", "arcface") else float("nan")
            rec = EvalRecord(t, float(value), acc, ci, margin)
            history.add(rec)
            if callback is not None:
                callback(rec)
    return model, history


# ----------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, cfg, model, update, margin=None):
    doc = {"config": cfg.to_dict(), "update": update, "margin": margin, "model": model.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (TrainConfig, FewShotModel, update, margin)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = TrainConfig.from_dict(doc["config"])
    return cfg, FewShotModel.from_dict(doc["model"]), doc["update"], doc.get("margin")
