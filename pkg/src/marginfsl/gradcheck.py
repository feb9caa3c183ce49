"""Gradient-oracle and identity checks run by ``marginfsl gradcheck``.

Each check draws random instances, computes an analytic quantity and an
independent reference, and reports the worst discrepancy. Gradient checks
compare against central finite differences; identity checks compare two
algebraically equal expressions.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import gnn
from . import losses as L
from .data import Episode
from .protonet import pn_classify, pn_linearize, pn_loss, prototypes
from .tensor import finite_diff_grad, grad_rel_error, l2_normalize, softmax_rows
from .triplets import TripletSet, contrastive_pairs, select_triplets_gnn, select_triplets_pn

GRAD_TOL = 1e-6
IDENTITY_TOL = 1e-12
# instances closer than this to a kink are redrawn; the FD oracle is invalid there
KINK_GAP = 1e-3


class Redraw(Exception):
    pass


@dataclass
class Check:
    name: str
    fn: object            # rng -> (analytic, reference)
    n: int = 50
    tol: float = GRAD_TOL
    kind: str = "grad"    # "grad": relative error with 1e-9 floor; "identity": max abs diff


@dataclass
class CheckResult:
    name: str
    n: int
    max_err: float
    tol: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_err) and self.max_err <= self.tol)


def _flat_fd(f, arrays):
    """FD gradient of f(*arrays) w.r.t. all arrays, flattened in order."""
    shapes = [a.shape for a in arrays]
    sizes = [a.size for a in arrays]
    x0 = np.concatenate([a.ravel() for a in arrays])

    def g(x):
        parts = np.split(x, np.cumsum(sizes)[:-1])
        return f(*[p.reshape(s) for p, s in zip(parts, shapes)])

    return finite_diff_grad(g, x0)


def _flat(*arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def _labels(rng, n, c):
    y = np.concatenate([np.arange(c), rng.integers(0, c, n - c)])
    return rng.permutation(y)


def _random_triplets(rng, labels, count):
    out = []
    n = len(labels)
    while len(out) < count:
        a, p, q = rng.integers(0, n, 3)
        if a != p and labels[a] == labels[p] and labels[a] != labels[q]:
            out.append((a, p, q))
    return TripletSet(np.array(out))


def _away_from(values, gap=KINK_GAP):
    if np.any(np.abs(values) < gap):
        raise Redraw


# --- loss gradients -----------------------------------------------------------

def check_softmax_ce(rng):
    n, c = rng.integers(2, 7), rng.integers(2, 6)
    z = rng.normal(0, 2, (n, c))
    y = rng.integers(0, c, n)
    out = L.softmax_ce(z, y)
    return out.grad_embeddings, _flat_fd(lambda z_: L.softmax_ce(z_, y).value, [z])


def _triplet_instance(rng, normalized=False):
    n, d, c = rng.integers(5, 9), rng.integers(2, 5), rng.integers(2, 4)
    y = _labels(rng, n, c)
    ts = _random_triplets(rng, y, rng.integers(3, 12))
    emb = rng.normal(0, 1, (n, d))
    m = rng.uniform(0.2, 2.0) if not normalized else rng.uniform(0.1, 1.5)
    base = l2_normalize(emb)[0] if normalized else emb
    _away_from(L.triplet_brackets(base, ts, m))
    return emb, ts, m, y


def check_triplet(rng):
    emb, ts, m, _ = _triplet_instance(rng)
    out = L.triplet_loss(emb, ts, m)
    return out.grad_embeddings, _flat_fd(lambda e: L.triplet_loss(e, ts, m).value, [emb])


def check_normalized_triplet(rng):
    emb, ts, m, _ = _triplet_instance(rng, normalized=True)
    out = L.normalized_triplet_loss(emb, ts, m)
    return out.grad_embeddings, _flat_fd(lambda e: L.normalized_triplet_loss(e, ts, m).value, [emb])


def _contrastive(rng, normalized):
    emb, ts, m, y = _triplet_instance(rng, normalized)
    pairs = contrastive_pairs(ts)
    base = l2_normalize(emb)[0] if normalized else emb
    i, j = pairs.T
    _away_from(m - np.sum((base[i] - base[j]) ** 2, axis=1))
    out = L.contrastive_loss(emb, pairs, y, m, normalized)
    num = _flat_fd(lambda e: L.contrastive_loss(e, pairs, y, m, normalized).value, [emb])
    return out.grad_embeddings, num


def check_contrastive(rng):
    return _contrastive(rng, False)


def check_normalized_contrastive(rng):
    return _contrastive(rng, True)


def _head_instance(rng):
    n, d, c = rng.integers(3, 7), rng.integers(2, 5), rng.integers(2, 5)
    emb = rng.normal(0, 1, (n, d))
    w = rng.normal(0, 1, (d, c))
    y = rng.integers(0, c, n)
    return emb, w, y


def _head_check(rng, loss_fn):
    emb, w, y = _head_instance(rng)
    out = loss_fn(emb, L.SoftmaxHead(w), y)
    num = _flat_fd(lambda e, w_: loss_fn(e, L.SoftmaxHead(w_), y).value, [emb, w])
    return _flat(out.grad_embeddings, out.grad_weights), num


def check_normface(rng):
    m = rng.uniform(0.3, 2.0)

    def fn(e, h, y):
        cos = l2_normalize(e)[0] @ l2_normalize(h.weights.T)[0].T
        _away_from(m - (2.0 - 2.0 * cos))
        return L.normface_loss(e, h, y, m)

    emb, w, y = _head_instance(rng)
    fn(emb, L.SoftmaxHead(w), y)
    out = L.normface_loss(emb, L.SoftmaxHead(w), y, m)
    num = _flat_fd(lambda e, w_: L.normface_loss(e, L.SoftmaxHead(w_), y, m).value, [emb, w])
    return _flat(out.grad_embeddings, out.grad_weights), num


def check_cosface(rng):
    s, m = rng.uniform(1, 12), rng.uniform(0, 0.5)
    return _head_check(rng, lambda e, h, y: L.cosface_loss(e, h, y, s, m))


def check_arcface(rng):
    s, m = rng.uniform(1, 12), rng.uniform(0, 0.5)
    return _head_check(rng, lambda e, h, y: L.arcface_loss(e, h, y, s, m))


def check_scaled_cosine_softmax(rng):
    s = rng.uniform(1, 12)
    return _head_check(rng, lambda e, h, y: L.scaled_cosine_softmax(e, h, y, s))


def check_head_softmax(rng):
    emb, w, y = _head_instance(rng)
    b = rng.normal(0, 1, w.shape[1])
    out = L.head_softmax_ce(emb, L.SoftmaxHead(w, b), y)
    num = _flat_fd(lambda e, w_, b_: L.head_softmax_ce(e, L.SoftmaxHead(w_, b_), y).value, [emb, w, b])
    return _flat(out.grad_embeddings, out.grad_weights, out.grad_bias), num


def _pn_check(rng, metric):
    c, k, q, d = rng.integers(2, 5), rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 5)
    sl = np.repeat(np.arange(c), k)
    ql = np.repeat(np.arange(c), q)
    emb = rng.normal(0, 1, (c * k + c * q, d))
    s = rng.uniform(1, 10)
    out = pn_loss(emb, sl, ql, metric, s)
    return out.grad_embeddings, _flat_fd(lambda e: pn_loss(e, sl, ql, metric, s).value, [emb])


def check_pn_euclidean(rng):
    return _pn_check(rng, "euclidean")


def check_pn_cosine(rng):
    return _pn_check(rng, "cosine")


def check_encoder(rng):
    act = ("relu", "tanh")[rng.integers(2)]
    widths = [int(rng.integers(1, 6)) for _ in range(rng.integers(2, 5))]
    spec = enc.EncoderSpec(tuple(widths), act)
    params = enc.init(spec, int(rng.integers(2**31)))
    for b in params.biases:
        b[:] = rng.normal(0, 0.3, b.shape)
    x = rng.normal(0, 1, (int(rng.integers(1, 5)), widths[0]))
    cot = rng.normal(0, 1, (x.shape[0], widths[-1]))
    out, cache = enc.forward(params, x)
    if act == "relu":
        for z in cache.preacts[:-1]:
            _away_from(z)
    grads, g_in = enc.backward(params, cache, cot)

    def f(*arrays):
        return float(np.sum(enc.forward(params.with_arrays(arrays[:-1]), arrays[-1])[0] * cot))

    num = _flat_fd(f, params.arrays() + [x])
    return _flat(*grads.arrays(), g_in), num


def tiny_gnn_instance(rng, c=3, k=2, d_in=3, d_enc=4, layers=(5, 4), n_unlabeled=0):
    """One single-query episode plus encoder and graph parameters (random variant)."""
    ep = Episode(
        support_x=rng.normal(0, 1, (c * k, d_in)), support_y=np.repeat(np.arange(c), k),
        query_x=rng.normal(0, 1, (1, d_in)), query_y=np.array([rng.integers(c)]),
        unlabeled_x=rng.normal(0, 1, (n_unlabeled, d_in)), class_map=np.arange(c),
        support_idx=np.arange(c * k), query_idx=np.array([c * k]),
        unlabeled_idx=np.arange(n_unlabeled) + c * k + 1)
    e = enc.init(enc.EncoderSpec((d_in, d_enc), "tanh"), int(rng.integers(2**31)))
    g = gnn.init_params(d_enc + c, list(layers), c, int(rng.integers(2**31)), adjacency_hidden=(4,),
                        per_layer_adjacency=bool(rng.integers(2)),
                        normalize_adjacency=bool(rng.integers(2)))
    n = c * k + 1 + n_unlabeled
    for mlp in g.adjacency_mlps:
        for b in mlp.biases:
            b[:] = rng.normal(0, 0.3, b.shape)
        if not g.normalize_adjacency:
            # keep raw row sums O(1); otherwise features blow up and FD roundoff
            # swamps the small gradient components
            mlp.weights[-1] /= n
            mlp.biases[-1] /= n
    return ep, e, g


def _gnn_kinks(cache, d_enc):
    # leaky-relu kinks on hidden layers
    for z in cache.preacts[:-1]:
        _away_from(z)
    # |x_i - x_j| kinks in the adjacency input; label-block columns of X^(0)
    # and the diagonal are constant under perturbation, so they are skipped
    n_adj = len(cache.adjs)
    for l in range(n_adj):
        x = cache.feats[l]
        if l == 0:
            x = x[:, :, :d_enc]
        dx = x[:, :, None, :] - x[:, None, :, :]
        off = ~np.eye(x.shape[1], dtype=bool)
        _away_from(dx[:, off, :])


def check_gnn(rng):
    """Encoder + graph + softmax head + triplet term on X^(M), end to end."""
    ep, e, g = tiny_gnn_instance(rng, n_unlabeled=int(rng.integers(0, 2)))
    batch = gnn.make_batch([ep])
    n = batch.n_nodes
    ts = select_triplets_gnn(batch.labels, 1, 1, rng, stride=n)
    m = rng.uniform(0.1, 1.0)

    def losses(e_, g_):
        logits, xm, caches = gnn.forward_batch(batch, e_, g_)
        flat = xm.reshape(-1, xm.shape[-1])
        return L.softmax_ce(logits, batch.query_labels), L.triplet_loss(flat, ts, m), xm, caches

    ce, tl, xm, caches = losses(e, g)
    _gnn_kinks(caches[1], e.spec.layer_widths[-1])
    _away_from(L.triplet_brackets(xm.reshape(-1, xm.shape[-1]), ts, m))
    g_enc, g_gnn = gnn.backward_batch(batch, e, g, caches, ce.grad_embeddings,
                                      tl.grad_embeddings.reshape(xm.shape))
    k = len(e.arrays())

    def f(*arrays):
        ce_, tl_, _, _ = losses(e.with_arrays(arrays[:k]), g.with_arrays(arrays[k:]))
        return ce_.value + tl_.value

    num = _flat_fd(f, e.arrays() + g.arrays())
    return _flat(*g_enc.arrays(), *g_gnn.arrays()), num


# --- identities -----------------------------------------------------------------

def check_triplet_decomposition(rng):
    """Pivot row of the triplet gradient vs the pull/push form with pairing centers."""
    c = int(rng.integers(2, 4))
    y = rng.permutation(np.concatenate([np.repeat(np.arange(c), 2), rng.integers(0, c, rng.integers(0, 6))]))
    ts = select_triplets_pn(y, int(rng.integers(1, 4)), int(rng.integers(1, 4)), rng)
    emb = rng.normal(0, 1, (len(y), int(rng.integers(2, 6))))
    pivot = int(rng.integers(len(y)))
    br = L.triplet_brackets(emb, ts, 0.0)
    involved = np.any(ts.index == pivot, axis=1)
    # margin large enough that every triplet touching the pivot is active
    m = max(0.0, -br[involved].min()) + rng.uniform(0.1, 1.0)
    grad = L.triplet_loss(emb, ts, m).grad_embeddings[pivot]
    return grad, L.triplet_grad_decomposition(emb, ts, y, pivot, m)


def check_pn_linearity(rng):
    c, d, nq = rng.integers(2, 8), rng.integers(1, 8), rng.integers(1, 10)
    centers = rng.normal(0, 1, (c, d))
    protos = prototypes(centers, np.arange(c))
    q = rng.normal(0, 1.5, (nq, d))
    w, b = pn_linearize(protos)
    probs = pn_classify(q, protos)
    return probs, softmax_rows(q @ w + b)


def check_margin_reductions(rng):
    emb, w, y = _head_instance(rng)
    h = L.SoftmaxHead(w)
    s = rng.uniform(1, 30)
    a = L.cosface_loss(emb, h, y, s, 0.0)
    b = L.arcface_loss(emb, h, y, s, 0.0)
    c = L.scaled_cosine_softmax(emb, h, y, s)
    return (_flat(a.value, b.value, a.value, a.grad_embeddings, b.grad_embeddings, a.grad_weights),
            _flat(c.value, c.value, b.value, c.grad_embeddings, c.grad_embeddings, c.grad_weights))


def default_checks(n=50):
    grads = [
        ("softmax_ce", check_softmax_ce),
        ("linear_head_softmax", check_head_softmax),
        ("triplet", check_triplet),
        ("normalized_triplet", check_normalized_triplet),
        ("contrastive", check_contrastive),
        ("normalized_contrastive", check_normalized_contrastive),
        ("normface", check_normface),
        ("cosface", check_cosface),
        ("arcface", check_arcface),
        ("scaled_cosine_softmax", check_scaled_cosine_softmax),
        ("pn_loss_euclidean", check_pn_euclidean),
        ("pn_loss_cosine", check_pn_cosine),
        ("encoder_backward", check_encoder),
        ("gnn_end_to_end", check_gnn),
    ]
    checks = [Check(name, fn, n) for name, fn in grads]
    checks += [
        Check("triplet_pull_push_identity", check_triplet_decomposition, 100, IDENTITY_TOL, "identity"),
        Check("pn_linear_model_identity", check_pn_linearity, 100, IDENTITY_TOL, "identity"),
        Check("zero_margin_reductions", check_margin_reductions, 100, IDENTITY_TOL, "identity"),
    ]
    return checks


def run_check(check, rng, max_redraws=1000):
    t0 = time.perf_counter()
    worst = 0.0
    done = redraws = 0
    while done < check.n:
        try:
            a, b = check.fn(rng)
        except Redraw:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(f"{check.name}: too many instances near a kink")
            continue
        if check.kind == "grad":
            err = grad_rel_error(a, b)
        else:
            a, b = np.ravel(a), np.ravel(b)
            err = float(np.max(np.abs(a - b))) if a.shape == b.shape else np.inf
        worst = max(worst, err) if np.isfinite(err) else np.inf
        done += 1
    return CheckResult(check.name, check.n, worst, check.tol, time.perf_counter() - t0)


def run_suite(checks=None, seed=0):
    checks = default_checks() if checks is None else checks
    rng = np.random.default_rng(seed)
    return [run_check(c, rng) for c in checks]


def format_table(results):
    lines = [f"{'check':<30} {'n':>4} {'max err':>11} {'tol':>8} {'time':>7}  result"]
    for r in results:
        lines.append(f"{r.name:<30} {r.n:>4} {r.max_err:>11.3e} {r.tol:>8.0e} "
                     f"{r.seconds:>6.2f}s  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
