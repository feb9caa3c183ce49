"""Classification and large-margin losses with analytic gradients.

Every loss returns a :class:`LossOut` holding the value and gradients with
respect to the embeddings (and classifier weights where a head is involved).
Chaining into encoder parameters is left to the caller.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, exp_flush, l2_normalize, l2_normalize_backward, log_softmax_rows
from .triplets import pairing_partition

KINDS = ("triplet", "normalized_triplet", "contrastive", "normalized_contrastive",
         "normface", "cosface", "arcface", "none")
# kinds that act on embeddings through triplets or pairs
EMBEDDING_KINDS = ("triplet", "normalized_triplet", "contrastive", "normalized_contrastive")
# kinds that need a parametric classifier head
HEAD_KINDS = ("normface", "cosface", "arcface")
NORMALIZED_KINDS = ("normalized_triplet", "normalized_contrastive", "normface", "cosface", "arcface")

_EMPTY = np.zeros((0, 0))


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    margin: float = 10.0
    scale: float = 10.0
    kind: str = "triplet"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")


@dataclass
class SoftmaxHead:
    weights: np.ndarray              # d x C, column j is w_j
    bias: np.ndarray = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ShapeError(f"head weights must be d x C with C >= 2, got {self.weights.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[1])
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def n_classes(self):
        return self.weights.shape[1]

    def logits(self, emb):
        return emb @ self.weights + self.bias


@dataclass
class LossOut:
    value: float
    grad_embeddings: np.ndarray
    grad_weights: np.ndarray = _EMPTY
    grad_bias: np.ndarray = _EMPTY

    def has_weights(self):
        return self.grad_weights.size > 0


def _check_labels(labels, n, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    return labels


def softmax_ce(logits, labels):
    """Mean cross entropy; ``grad_embeddings`` holds the gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax_rows(logits)
    rows = np.arange(n)
    value = 0.0 - logp[rows, labels].mean()   # never -0.0
    grad = exp_flush(logp)
    grad[rows, labels] -= 1.0
    return LossOut(float(value), grad / n)


def head_softmax_ce(emb, head, labels):
    """Cross entropy of a linear head; gradients to embeddings, weights and bias."""
    out = softmax_ce(head.logits(emb), labels)
    g = out.grad_embeddings
    return LossOut(out.value, g @ head.weights.T, emb.T @ g, g.sum(axis=0))


def _sq_dists(emb):
    sq = np.einsum("ij,ij->i", emb, emb)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _pair_grad(emb, i, j, w, scale):
    """Gradient of scale * sum_k w_k ||f_i - f_j||^2 over pairs (i_k, j_k)."""
    n = emb.shape[0]
    wmat = np.bincount(i * n + j, weights=w, minlength=n * n).reshape(n, n)
    wmat = wmat + wmat.T
    return 2.0 * scale * (wmat.sum(axis=1)[:, None] * emb - wmat @ emb)


def triplet_brackets(emb, ts, m):
    d2 = _sq_dists(emb)
    a, p, n = ts.index.T
    return d2[a, p] - d2[a, n] + m


def triplet_loss(emb, ts, m):
    emb = np.asarray(emb, dtype=np.float64)
    if len(ts) == 0:
        raise ValueError("triplet loss needs at least one triplet")
    if ts.index.min() < 0 or ts.index.max() >= emb.shape[0]:
        raise IndexError("triplet index out of range")
    nt = len(ts)
    br = triplet_brackets(emb, ts, m)
    active = br > 0
    value = br[active].sum() / nt
    a, p, n = ts.index[active].T
    k = int(active.sum())
    i = np.concatenate([a, a])
    j = np.concatenate([p, n])
    w = np.concatenate([np.ones(k), -np.ones(k)])
    grad = _pair_grad(emb, i, j, w, 1.0 / nt)
    return LossOut(float(value), grad)


def triplet_grad_decomposition(emb, ts, labels, pivot, m=None):
    """Pivot-row gradient written as a pull toward c_s and a push away from c_d.

    Valid only while every triplet touching ``pivot`` is active; pass the
    margin ``m`` to have that checked.
    """
    emb = np.asarray(emb, dtype=np.float64)
    nt = len(ts)
    if m is not None:
        involved = np.any(ts.index == pivot, axis=1)
        if np.any(triplet_brackets(emb, ts, m)[involved] <= 0):
            raise ValueError("an inactive triplet involves the pivot")
    part = pairing_partition(ts, labels, pivot)
    f = emb[pivot]
    out = np.zeros_like(f)
    if part.same:
        idx, mult = zip(*part.same.items())
        size = sum(mult)
        c_s = np.asarray(mult) @ emb[list(idx)] / size
        out -= (2.0 * size / nt) * (c_s - f)
    if part.diff:
        idx, mult = zip(*part.diff.items())
        size = sum(mult)
        c_d = np.asarray(mult) @ emb[list(idx)] / size
        out -= (2.0 * size / nt) * (f - c_d)
    return out


def total_loss(classification, margin, lam):
    """classification + lam * margin, for values and gradients."""
    if classification.grad_embeddings.shape != margin.grad_embeddings.shape:
        raise ShapeError("embedding gradient shapes differ")
    gw_c, gw_m = classification.grad_weights, margin.grad_weights
    if gw_c.size and gw_m.size:
        if gw_c.shape != gw_m.shape:
            raise ShapeError("weight gradient shapes differ")
        gw = gw_c + lam * gw_m
    elif gw_m.size:
        gw = lam * gw_m
    else:
        gw = gw_c
    return LossOut(classification.value + lam * margin.value,
                   classification.grad_embeddings + lam * margin.grad_embeddings, gw,
                   classification.grad_bias)


def normalized_triplet_loss(emb, ts, m):
    unit, norms = l2_normalize(emb)
    out = triplet_loss(unit, ts, m)
    return LossOut(out.value, l2_normalize_backward(unit, norms, out.grad_embeddings))


def contrastive_loss(emb, pairs, labels, m, normalized=False):
    """Mean over pairs: squared distance for same-label pairs, hinge otherwise."""
    emb = np.asarray(emb, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ValueError("contrastive loss needs at least one pair")
    labels = np.asarray(labels)
    if normalized:
        emb, norms = l2_normalize(emb)
    i, j = pairs.T
    diff = emb[i] - emb[j]
    d2 = np.einsum("ij,ij->i", diff, diff)
    same = labels[i] == labels[j]
    hinge = m - d2
    active = ~same & (hinge > 0)
    n_pairs = len(pairs)
    value = (d2[same].sum() + hinge[active].sum()) / n_pairs
    w = np.where(same, 1.0, np.where(active, -1.0, 0.0))
    grad = _pair_grad(emb, i, j, w, 1.0 / n_pairs)
    if normalized:
        grad = l2_normalize_backward(emb, norms, grad)
    return LossOut(float(value), grad)


def _normalized_cosines(emb, head):
    f, f_norm = l2_normalize(emb)
    w, w_norm = l2_normalize(np.asarray(head.weights, dtype=np.float64).T)
    return f, f_norm, w, w_norm, f @ w.T


def _cosine_backward(f, f_norm, w, w_norm, g_cos):
    g_f = g_cos @ w
    g_w = g_cos.T @ f
    return (l2_normalize_backward(f, f_norm, g_f),
            l2_normalize_backward(w, w_norm, g_w).T)


def normface_loss(emb, head, labels, m):
    """Contrastive-style loss between normalized embeddings and class weights."""
    f, f_norm, w, w_norm, cos = _normalized_cosines(emb, head)
    n, c = cos.shape
    labels = _check_labels(labels, n, c)
    d2 = np.maximum(2.0 - 2.0 * cos, 0.0)
    target = np.zeros((n, c), dtype=bool)
    target[np.arange(n), labels] = True
    hinge = m - d2
    active = ~target & (hinge > 0)
    value = (d2[target].sum() + hinge[active].sum()) / (n * c)
    g_cos = np.where(target, -2.0, np.where(active, 2.0, 0.0)) / (n * c)
    g_emb, g_w = _cosine_backward(f, f_norm, w, w_norm, g_cos)
    return LossOut(float(value), g_emb, g_w)


def _cosine_ce(emb, head, labels, s, target_fn):
    f, f_norm, w, w_norm, cos = _normalized_cosines(emb, head)
    n, c = cos.shape
    labels = _check_labels(labels, n, c)
    rows = np.arange(n)
    t_val, t_grad = target_fn(cos[rows, labels])
    logits = s * cos
    logits[rows, labels] = s * t_val
    ce = softmax_ce(logits, labels)
    g_cos = s * ce.grad_embeddings
    g_cos[rows, labels] *= t_grad
    g_emb, g_w = _cosine_backward(f, f_norm, w, w_norm, g_cos)
    return LossOut(ce.value, g_emb, g_w)


def scaled_cosine_softmax(emb, head, labels, s):
    return _cosine_ce(emb, head, labels, s, lambda c: (c, np.ones_like(c)))


def cosface_loss(emb, head, labels, s, m):
    if m < 0:
        raise ValueError("cosface margin must be >= 0")
    return _cosine_ce(emb, head, labels, s, lambda c: (c - m, np.ones_like(c)))


# d/dc sqrt(1 - c^2) is unbounded at c = +-1
_SIN_FLOOR = 1e-6


def arcface_target(c, m):
    """cos(theta + m) and its derivative in cos(theta); theta + m capped at pi."""
    c = np.clip(c, -1.0, 1.0)
    sin = np.sqrt(np.clip(1.0 - c * c, 0.0, 1.0))
    cos_m, sin_m = np.cos(m), np.sin(m)
    val = c * cos_m - sin * sin_m
    grad = cos_m + c * sin_m / np.maximum(sin, _SIN_FLOOR)
    capped = c < -cos_m
    return np.where(capped, -1.0, val), np.where(capped, 0.0, grad)


def arcface_loss(emb, head, labels, s, m):
    if m < 0:
        raise ValueError("arcface margin must be >= 0")
    return _cosine_ce(emb, head, labels, s, lambda c: arcface_target(c, m))


def large_margin_loss(kind, emb, labels, m, triplets=None, pairs=None, head=None):
    """Dispatch the margin term of the total objective by loss kind."""
    if kind == "triplet":
        return triplet_loss(emb, triplets, m)
    if kind == "normalized_triplet":
        return normalized_triplet_loss(emb, triplets, m)
    if kind in ("contrastive", "normalized_contrastive"):
        return contrastive_loss(emb, pairs, labels, m, normalized=kind.startswith("normalized"))
    if kind == "normface":
        return normface_loss(emb, head, labels, m)
    raise ValueError(f"{kind!r} is not an additive margin term")
