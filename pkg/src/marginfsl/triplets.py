"""Offline triplet selection and the pairing partition of a pivot sample."""

import csv
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class SelectionError(ValueError):
    pass


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass(frozen=True)
class TripletSet:
    index: np.ndarray   # (N_t, 3) int64 rows of (anchor, positive, negative)

    def __post_init__(self):
        idx = np.asarray(self.index, dtype=np.int64).reshape(-1, 3)
        idx.setflags(write=False)
        object.__setattr__(self, "index", idx)

    def __len__(self):
        return self.index.shape[0]

    def __iter__(self):
        for a, p, n in self.index.tolist():
            yield Triplet(a, p, n)

    @property
    def count(self):
        return len(self)

    @property
    def anchors(self):
        return self.index[:, 0]

    @property
    def positives(self):
        return self.index[:, 1]

    @property
    def negatives(self):
        return self.index[:, 2]

    def validate(self, labels):
        labels = np.asarray(labels)
        a, p, n = self.index.T
        if self.index.size and (self.index.min() < 0 or self.index.max() >= len(labels)):
            raise SelectionError("triplet index out of range")
        if np.any(a == p):
            raise SelectionError("anchor equals positive")
        if np.any(labels[a] != labels[p]) or np.any(labels[a] == labels[n]):
            raise SelectionError("triplet violates label constraints")


@dataclass
class PairingPartition:
    same: Counter
    diff: Counter
    excluded: set


def _draw(rng, rows, pool_size, k, exclude=None):
    """``k`` picks per row from range(pool_size), optionally skipping one slot.

    Without replacement when the (reduced) pool is large enough, otherwise with.
    """
    avail = pool_size - (exclude is not None)
    if avail < 1:
        raise SelectionError("empty candidate pool")
    if avail >= k:
        keys = rng.random((rows, pool_size))
        if exclude is not None:
            keys[np.arange(rows), exclude] = np.inf
        return np.argpartition(keys, k - 1, axis=1)[:, :k]
    picks = rng.integers(0, avail, size=(rows, k))
    if exclude is not None:
        picks += picks >= np.asarray(exclude)[:, None]
    return picks


def _select(labels, anchor_mask, n_pos, n_neg, rng):
    labels = np.asarray(labels)
    out = []
    for c in np.unique(labels[anchor_mask]):
        same = np.flatnonzero(labels == c)
        other = np.flatnonzero(labels != c)
        if len(same) < 2:
            raise SelectionError(f"class {c} has a single sample; no positive available")
        if len(other) == 0:
            raise SelectionError("need at least two classes to form negatives")
        anchors = np.flatnonzero((labels == c) & anchor_mask)
        slot = np.searchsorted(same, anchors)
        pos = same[_draw(rng, len(anchors), len(same), n_pos, exclude=slot)]
        neg = other[_draw(rng, len(anchors) * n_pos, len(other), n_neg)]
        neg = neg.reshape(len(anchors), n_pos, n_neg)
        trip = np.empty((len(anchors), n_pos, n_neg, 3), dtype=np.int64)
        trip[..., 0] = anchors[:, None, None]
        trip[..., 1] = pos[:, :, None]
        trip[..., 2] = neg
        out.append(trip.reshape(-1, 3))
    order = np.concatenate(out)
    # anchor-major order, stable within each anchor
    return order[np.argsort(order[:, 0], kind="stable")]


def select_triplets_gnn(batch_labels, n_pos=5, n_neg=5, rng=None, stride=None):
    """Triplets over the support samples of a batch of episodes.

    Positives share the anchor's label representation anywhere in the batch.
    Sample ``j`` of episode ``e`` is addressed as ``e * stride + j`` (stride
    defaults to the support size, i.e. indices into the stacked supports).
    """
    rng = np.random.default_rng() if rng is None else rng
    batch_labels = [np.asarray(y) for y in batch_labels]
    sizes = {len(y) for y in batch_labels}
    if len(sizes) != 1:
        raise SelectionError("all episodes in a batch must have the same support size")
    size = sizes.pop()
    stride = size if stride is None else stride
    if stride < size:
        raise SelectionError("stride smaller than support size")
    labels = np.concatenate(batch_labels)
    local = _select(labels, np.ones(len(labels), dtype=bool), n_pos, n_neg, rng)
    ep, j = np.divmod(local, size)
    return TripletSet(ep * stride + j)


def select_triplets_pn(episode, n_pos=10, n_neg=10, rng=None):
    """Triplets over all support and query samples of one episode.

    ``episode`` is an Episode or a label array; indices address the rows of
    ``[support; query]``.
    """
    rng = np.random.default_rng() if rng is None else rng
    if hasattr(episode, "support_y"):
        labels = np.concatenate([episode.support_y, episode.query_y])
    else:
        labels = np.asarray(episode)
    return TripletSet(_select(labels, np.ones(len(labels), dtype=bool), n_pos, n_neg, rng))


def pairing_partition(ts, labels, pivot):
    """Multisets of samples paired with ``pivot`` through a distance term."""
    labels = np.asarray(labels)
    same, diff = Counter(), Counter()
    for a, p, n in ts:
        if a == pivot:
            same[p] += 1
            diff[n] += 1
        elif p == pivot:
            same[a] += 1
        elif n == pivot:
            diff[a] += 1
    for j in list(same):
        if labels[j] != labels[pivot]:
            raise SelectionError(f"sample {j} paired as same-class with pivot {pivot}")
    paired = set(same) | set(diff)
    excluded = set(range(len(labels))) - paired - {pivot}
    return PairingPartition(same, diff, excluded)


def contrastive_pairs(ts):
    """Deduplicated unordered pairs: each triplet yields (a, p) and (a, n)."""
    pairs = np.concatenate([ts.index[:, [0, 1]], ts.index[:, [0, 2]]])
    return np.unique(np.sort(pairs, axis=1), axis=0)


def dump_csv(ts, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor", "positive", "negative"])
        w.writerows(ts.index.tolist())


def load_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return TripletSet(np.asarray([[int(v) for v in r] for r in rows[1:]], dtype=np.int64))
