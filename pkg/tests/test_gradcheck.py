import numpy as np

from marginfsl import gradcheck as gc


def test_suite_covers_every_loss_and_model():
    names = {c.name for c in gc.default_checks()}
    for want in ("softmax_ce", "triplet", "contrastive", "normalized_triplet", "normalized_contrastive",
                 "normface", "cosface", "arcface", "pn_loss_euclidean", "pn_loss_cosine", "encoder_backward",
                 "gnn_end_to_end", "triplet_pull_push_identity", "pn_linear_model_identity", "zero_margin_reductions"):
        assert want in names


def test_corrupted_gradient_fails():
    def broken(rng):
        a, b = gc.check_softmax_ce(rng)
        a = a.copy()
        a[0, 0] += 1e-3
        return a, b

    good = gc.run_check(gc.Check("softmax_ce", gc.check_softmax_ce, n=10), np.random.default_rng(0))
    bad = gc.run_check(gc.Check("corrupted", broken, n=10), np.random.default_rng(0))
    assert good.passed and not bad.passed
    table = gc.format_table([good, bad])
    assert "corrupted" in table and "FAIL" in table


def test_identity_shape_mismatch_fails():
    res = gc.run_check(gc.Check("mismatch", lambda rng: (np.zeros(2), np.zeros(3)), n=1, tol=1e-12,
                                kind="identity"), np.random.default_rng(0))
    assert not res.passed


def test_nan_fails():
    res = gc.run_check(gc.Check("nan", lambda rng: (np.array([np.nan]), np.array([1.0])), n=1),
                       np.random.default_rng(0))
    assert not res.passed
