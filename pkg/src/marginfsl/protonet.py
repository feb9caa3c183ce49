"""Prototypical networks: class prototypes and the non-parametric softmax classifier."""

from dataclasses import dataclass

import numpy as np

from .losses import LossOut
from .tensor import (NumericError, exp_flush, l2_normalize, l2_normalize_backward, log_softmax_rows,
                     softmax_rows)

METRICS = ("euclidean", "cosine")


@dataclass
class PrototypeSet:
    centers: np.ndarray          # C x d
    metric: str = "euclidean"
    scale: float = 10.0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.centers.shape[0] < 2:
            raise ValueError("need at least two prototypes")

    @property
    def n_classes(self):
        return self.centers.shape[0]


def _class_counts(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if len(counts) > n_classes or np.any(counts == 0):
        missing = np.flatnonzero(counts[:n_classes] == 0).tolist()
        raise ValueError(f"support is missing classes {missing} (or has labels >= {n_classes})")
    return labels, counts


def prototypes(support_emb, support_labels, metric="euclidean", scale=10.0, n_classes=None):
    support_emb = np.asarray(support_emb, dtype=np.float64)
    labels = np.asarray(support_labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    labels, counts = _class_counts(labels, n_classes)
    sums = np.zeros((n_classes, support_emb.shape[1]))
    np.add.at(sums, labels, support_emb)
    return PrototypeSet(sums / counts[:, None], metric, scale)


def pn_logits(query_emb, protos):
    """Negative distances: -||f - c_k||^2, or s * cos(f, c_k) for the cosine metric."""
    q = np.asarray(query_emb, dtype=np.float64)
    if q.shape[-1] != protos.centers.shape[1]:
        raise ValueError(f"query dim {q.shape[-1]} != prototype dim {protos.centers.shape[1]}")
    if protos.metric == "euclidean":
        diff = q[:, None, :] - protos.centers[None, :, :]
        return -np.einsum("qcd,qcd->qc", diff, diff)
    try:
        qn, _ = l2_normalize(q)
        cn, _ = l2_normalize(protos.centers)
    except NumericError as exc:
        raise NumericError(f"cosine metric: {exc}") from None
    return protos.scale * (qn @ cn.T)


def pn_classify(query_emb, protos):
    return softmax_rows(pn_logits(query_emb, protos))


def pn_linearize(protos):
    """Euclidean PN as a linear classifier: w_k = 2 c_k, b_k = -c_k^T c_k."""
    if protos.metric != "euclidean":
        raise ValueError("only the euclidean metric linearizes")
    c = protos.centers
    return 2.0 * c.T, -np.einsum("kd,kd->k", c, c)


def pn_loss(emb, support_labels, query_labels, metric="euclidean", scale=10.0):
    """Episode loss on stacked embeddings ``[support; query]``.

    Per-class mean of the query negative log-probabilities, averaged over
    classes. Gradients reach support rows through the prototypes.
    """
    emb = np.asarray(emb, dtype=np.float64)
    s_lab = np.asarray(support_labels, dtype=np.int64)
    q_lab = np.asarray(query_labels, dtype=np.int64)
    ns = len(s_lab)
    if emb.shape[0] != ns + len(q_lab):
        raise ValueError("embedding rows must equal support + query count")
    n_classes = int(s_lab.max()) + 1
    s_lab, s_counts = _class_counts(s_lab, n_classes)
    q_counts = np.bincount(q_lab, minlength=n_classes)
    if len(q_counts) > n_classes:
        raise ValueError("query label outside the support classes")
    if np.any(q_counts == 0):
        raise ValueError(f"classes {np.flatnonzero(q_counts == 0).tolist()} have no queries")

    support, query = emb[:ns], emb[ns:]
    protos = prototypes(support, s_lab, metric, scale, n_classes)
    logits = pn_logits(query, protos)
    logp = log_softmax_rows(logits)
    rows = np.arange(len(q_lab))
    weight = 1.0 / (n_classes * q_counts[q_lab])
    value = 0.0 - (weight * logp[rows, q_lab]).sum()

    g = exp_flush(logp)
    g[rows, q_lab] -= 1.0
    g *= weight[:, None]
    c = protos.centers
    if metric == "euclidean":
        g_q = -2.0 * (g.sum(axis=1)[:, None] * query - g @ c)
        g_c = 2.0 * (g.T @ query - g.sum(axis=0)[:, None] * c)
    else:
        qn, q_norm = l2_normalize(query)
        cn, c_norm = l2_normalize(c)
        g_cos = scale * g
        g_q = l2_normalize_backward(qn, q_norm, g_cos @ cn)
        g_c = l2_normalize_backward(cn, c_norm, g_cos.T @ qn)
    g_s = g_c[s_lab] / s_counts[s_lab][:, None]
    return LossOut(float(value), np.vstack([g_s, g_q]))
