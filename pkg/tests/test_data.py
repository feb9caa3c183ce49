import numpy as np
import pytest
from hypothesis import given, strategies as st

from marginfsl.data import (CapacityError, Dataset, EpisodeSpec, ParseError, check_disjoint,
                            gen_gaussian_tasks, load_csv, load_split, sample_episode, save_csv,
                            save_split, split_classes)


def _check_episode(ds, spec, ep):
    c, k, q = spec.c_way, spec.k_shot, spec.n_query
    assert len(ep.support_y) == c * k and len(ep.query_y) == c * q
    assert np.array_equal(np.bincount(ep.support_y, minlength=c), [k] * c)
    assert np.array_equal(np.bincount(ep.query_y, minlength=c), [q] * c)
    assert len(ep.unlabeled_x) == spec.n_unlabeled
    rows = np.concatenate([ep.support_idx, ep.query_idx, ep.unlabeled_idx])
    assert len(set(rows.tolist())) == len(rows)
    # relabeling is consistent with the class map
    assert np.array_equal(ds.labels[ep.support_idx], ep.class_map[ep.support_y])
    assert np.array_equal(ds.labels[ep.query_idx], ep.class_map[ep.query_y])
    assert set(ds.labels[ep.unlabeled_idx].tolist()) <= set(ep.class_map.tolist())
    assert np.array_equal(ds.features[ep.support_idx], ep.support_x)


def test_episode_sizes_from_spec_examples():
    ds = gen_gaussian_tasks(10, 20, 3, 1.0, 0.5, 0)
    ep = sample_episode(ds, EpisodeSpec(5, 5, 1, 0), np.random.default_rng(0))
    assert len(ep.support_y) == 25 and len(ep.query_y) == 5
    spec = EpisodeSpec(5, 5, 15, 0)
    assert spec.per_class_need() == 20
    ep = sample_episode(ds, spec, np.random.default_rng(0))
    counts = np.bincount(np.concatenate([ep.support_y, ep.query_y]))
    assert np.all(counts == 20)


def test_episode_deterministic():
    ds = gen_gaussian_tasks(8, 10, 2, 1.0, 0.5, 0)
    spec = EpisodeSpec(3, 2, 2, 2)
    a = sample_episode(ds, spec, np.random.default_rng(3))
    b = sample_episode(ds, spec, np.random.default_rng(3))
    for f in ("support_x", "query_x", "unlabeled_x", "support_y", "query_y", "class_map"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_episode_invariants_1000_draws():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_classes = int(rng.integers(2, 9))
        spec = EpisodeSpec(int(rng.integers(2, n_classes + 1)), int(rng.integers(1, 4)),
                           int(rng.integers(1, 4)), int(rng.integers(0, 5)))
        ds = gen_gaussian_tasks(n_classes, spec.per_class_need() + int(rng.integers(0, 3)), 2,
                                1.0, 0.3, int(rng.integers(1 << 30)))
        _check_episode(ds, spec, sample_episode(ds, spec, rng))


def test_capacity_errors():
    ds = gen_gaussian_tasks(3, 4, 2, 1.0, 0.5, 0)
    with pytest.raises(CapacityError):
        sample_episode(ds, EpisodeSpec(4, 1, 1), np.random.default_rng(0))
    with pytest.raises(CapacityError):
        sample_episode(ds, EpisodeSpec(2, 3, 2), np.random.default_rng(0))


def test_class_frequency_uniform():
    ds = gen_gaussian_tasks(10, 5, 2, 1.0, 0.5, 0)
    rng = np.random.default_rng(1)
    counts = np.zeros(10)
    n = 10_000
    for _ in range(n):
        ep = sample_episode(ds, EpisodeSpec(3, 1, 1), rng)
        counts[ep.class_map] += 1
    p = 3 / 10
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_gen_gaussian_examples():
    ds = gen_gaussian_tasks(3, 4, 5, 1.0, 1e-9, 0)
    assert len(ds) == 12 and [len(ds.class_index[c]) for c in ds.classes] == [4, 4, 4]
    for c in ds.classes:
        rows = ds.features[ds.class_index[c]]
        assert np.max(np.abs(rows - rows[0])) <= 1e-8
    a, b = gen_gaussian_tasks(3, 4, 5, 1.0, 0.5, 9), gen_gaussian_tasks(3, 4, 5, 1.0, 0.5, 9)
    assert np.array_equal(a.features, b.features)


def test_gen_gaussian_class_mean():
    sigma = 0.7
    ds = gen_gaussian_tasks(1, 100_000, 3, 1.0, sigma, 4)
    # the center is the first draw of the generator
    center = np.random.default_rng(4).normal(0.0, 1.0, size=(1, 3))[0]
    assert np.all(np.abs(ds.features.mean(axis=0) - center) <= 3 * sigma / np.sqrt(100_000))


def test_gen_gaussian_rejects_bad_args():
    with pytest.raises(ValueError):
        gen_gaussian_tasks(0, 3, 2, 1.0, 0.5, 0)
    with pytest.raises(ValueError):
        gen_gaussian_tasks(2, 3, 2, 1.0, 0.0, 0)


def test_load_csv_minimal(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0,1.0,2.0\n1,3.0,4.0\n")
    ds = load_csv(p)
    assert len(ds) == 2 and ds.dim == 2 and ds.classes == [0, 1]


@pytest.mark.parametrize("text,line", [
    ("0,1.0,2.0\n1,3.0,4.0,5.0\n", 2),
    ("0,1.0\n1,abc\n", 2),
    ("x,1.0\n", 1),
])
def test_load_csv_errors_name_line(tmp_path, text, line):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(ParseError, match=f":{line}:"):
        load_csv(p)


def test_load_csv_empty(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        load_csv(p)


def test_csv_round_trip(tmp_path):
    ds = gen_gaussian_tasks(4, 3, 5, 2.0, 0.5, 1)
    save_csv(ds, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert np.max(np.abs(back.features - ds.features)) <= 1e-12
    assert np.array_equal(back.labels, ds.labels)


@given(st.integers(6, 40), st.integers(0, 1000))
def test_split_disjoint(n, seed):
    counts = (n // 2, n // 4, n - n // 2 - n // 4)
    s = split_classes(range(n), counts, seed)
    sets = [set(v) for v in s.values()]
    assert sum(len(x) for x in sets) == n
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
    assert [len(s[k]) for k in ("train", "val", "test")] == list(counts)


def test_split_file_round_trip(tmp_path):
    s = split_classes(range(30), (20, 5, 5), 0)
    save_split(s, tmp_path / "s.json")
    assert load_split(tmp_path / "s.json") == s


def test_disjointness_violations():
    with pytest.raises(ValueError):
        check_disjoint({"train": [1, 2], "test": [2, 3]})
    with pytest.raises(CapacityError):
        split_classes(range(5), (3, 2, 1), 0)


def test_subset_keeps_labels():
    ds = Dataset.from_arrays(np.arange(8.0).reshape(4, 2), [5, 6, 5, 7])
    sub = ds.subset([5])
    assert sub.classes == [5] and len(sub) == 2
