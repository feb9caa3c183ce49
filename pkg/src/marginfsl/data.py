"""Datasets, synthetic task generators, and the C-way K-shot episode sampler."""

import csv
import json
from dataclasses import dataclass

import numpy as np


class CapacityError(ValueError):
    """The dataset cannot supply the requested episode."""


class ParseError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_index: dict

    @classmethod
    def from_arrays(cls, features, labels):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ValueError(f"features {features.shape} and labels {labels.shape} disagree")
        index = {}
        for i, y in enumerate(labels.tolist()):
            index.setdefault(y, []).append(i)
        return cls(features, labels, index)

    @property
    def classes(self):
        return sorted(self.class_index)

    @property
    def dim(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def subset(self, class_ids):
        """Rows belonging to ``class_ids``, keeping their original labels."""
        rows = sorted(i for c in class_ids for i in self.class_index[c])
        return Dataset.from_arrays(self.features[rows], self.labels[rows])


@dataclass(frozen=True)
class EpisodeSpec:
    c_way: int
    k_shot: int
    n_query: int = 1
    n_unlabeled: int = 0

    def __post_init__(self):
        if self.c_way < 2 or self.k_shot < 1 or self.n_query < 1 or self.n_unlabeled < 0:
            raise ValueError(f"invalid episode spec {self}")

    def unlabeled_per_class(self):
        return -(-self.n_unlabeled // self.c_way)

    def per_class_need(self):
        return self.k_shot + self.n_query + self.unlabeled_per_class()


@dataclass
class Episode:
    """One sampled task. Support and query rows are grouped by episode label."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    unlabeled_x: np.ndarray
    class_map: np.ndarray          # episode label -> original class id
    support_idx: np.ndarray
    query_idx: np.ndarray
    unlabeled_idx: np.ndarray

    @property
    def c_way(self):
        return len(self.class_map)

    def with_single_query(self, j):
        """Copy of this episode keeping only query row ``j``."""
        return Episode(self.support_x, self.support_y,
                       self.query_x[j:j + 1], self.query_y[j:j + 1],
                       self.unlabeled_x, self.class_map,
                       self.support_idx, self.query_idx[j:j + 1], self.unlabeled_idx)


def sample_episode(ds, spec, rng):
    classes = ds.classes
    if len(classes) < spec.c_way:
        raise CapacityError(f"need {spec.c_way} classes, dataset has {len(classes)}")
    need = spec.per_class_need()
    short = [c for c in classes if len(ds.class_index[c]) < need]
    if short:
        raise CapacityError(f"classes {short[:5]} have fewer than {need} samples")

    chosen = rng.choice(np.asarray(classes), size=spec.c_way, replace=False)
    share = np.full(spec.c_way, spec.n_unlabeled // spec.c_way)
    extra = spec.n_unlabeled % spec.c_way
    if extra:
        share[rng.choice(spec.c_way, size=extra, replace=False)] += 1

    sup, qry, unl = [], [], []
    for k, c in enumerate(chosen):
        pool = np.asarray(ds.class_index[int(c)])
        take = rng.choice(pool, size=spec.k_shot + spec.n_query + share[k], replace=False)
        sup.append(take[:spec.k_shot])
        qry.append(take[spec.k_shot:spec.k_shot + spec.n_query])
        unl.append(take[spec.k_shot + spec.n_query:])
    sup = np.concatenate(sup)
    qry = np.concatenate(qry)
    unl = rng.permutation(np.concatenate(unl)).astype(np.int64)
    return Episode(
        support_x=ds.features[sup],
        support_y=np.repeat(np.arange(spec.c_way), spec.k_shot),
        query_x=ds.features[qry],
        query_y=np.repeat(np.arange(spec.c_way), spec.n_query),
        unlabeled_x=ds.features[unl].reshape(len(unl), ds.dim),
        class_map=chosen.astype(np.int64),
        support_idx=sup, query_idx=qry, unlabeled_idx=unl,
    )


def gen_gaussian_tasks(n_classes, samples_per_class, dim, center_scale, noise_sigma, seed):
    """Isotropic Gaussian clusters, one per class, labels 0..n_classes-1."""
    if min(n_classes, samples_per_class, dim) < 1:
        raise ValueError("counts must be >= 1")
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(n_classes, dim))
    noise = rng.normal(0.0, noise_sigma, size=(n_classes, samples_per_class, dim))
    features = (centers[:, None, :] + noise).reshape(-1, dim)
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    return Dataset.from_arrays(features, labels)


def load_csv(path):
    """Read ``label,f1,...,fd`` rows (no header)."""
    labels, rows = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) < 2:
                raise ParseError(f"{path}:{lineno}: expected a label and at least one feature")
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise ParseError(f"{path}:{lineno}: expected {width - 1} features, got {len(rec) - 1}")
            try:
                labels.append(int(rec[0]))
                rows.append([float(f) for f in rec[1:]])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: empty dataset")
    features = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ParseError(f"{path}: non-finite feature values")
    return Dataset.from_arrays(features, labels)


def save_csv(ds, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for y, row in zip(ds.labels.tolist(), ds.features.tolist()):
            w.writerow([y] + [repr(v) for v in row])


def split_classes(class_ids, counts, seed):
    """Randomly partition class ids into disjoint train/val/test pools."""
    class_ids = list(class_ids)
    n_train, n_val, n_test = counts
    if n_train + n_val + n_test > len(class_ids):
        raise CapacityError(f"split {counts} needs more than {len(class_ids)} classes")
    perm = np.random.default_rng(seed).permutation(class_ids).tolist()
    return {
        "train": sorted(perm[:n_train]),
        "val": sorted(perm[n_train:n_train + n_val]),
        "test": sorted(perm[n_train + n_val:n_train + n_val + n_test]),
    }


def check_disjoint(splits):
    seen = {}
    for name, ids in splits.items():
        for c in ids:
            if c in seen:
                raise ValueError(f"class {c} appears in both {seen[c]!r} and {name!r}")
            seen[c] = name


def save_split(splits, path):
    check_disjoint(splits)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: [int(c) for c in v] for k, v in splits.items()}, fh, indent=1)


def load_split(path):
    with open(path, encoding="utf-8") as fh:
        splits = json.load(fh)
    if not isinstance(splits, dict) or not all(isinstance(v, list) for v in splits.values()):
        raise ParseError(f"{path}: expected an object mapping split names to class-id lists")
    splits = {k: [int(c) for c in v] for k, v in splits.items()}
    check_disjoint(splits)
    return splits
