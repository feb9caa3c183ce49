"""Dense float64 matrix primitives and the finite-difference gradient oracle.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; the helpers
here add the shape checks and numerical safeguards the rest of the package
relies on.
"""

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {m.shape}")
    return m


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


# exp() of anything below this is under 1e-299. Such probabilities are flushed to
# exactly zero: subnormal values otherwise leak into gradients and slow BLAS down
# by an order of magnitude once a task is nearly solved.
UNDERFLOW_LOG = -690.0


def exp_flush(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(np.where(z < UNDERFLOW_LOG, -np.inf, z))


def softmax_rows(m):
    """Row-wise softmax with max subtraction; accepts any leading batch dims."""
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    e = exp_flush(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m):
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def l2_normalize(x, min_norm=1e-12):
    """Normalize rows to unit length; returns (unit_rows, norms)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < min_norm):
        raise NumericError(f"row norm below {min_norm:g}; cannot normalize")
    return x / norms, norms


def l2_normalize_backward(unit, norms, grad_unit):
    """Pull a gradient on normalized rows back to the raw rows."""
    dot = np.sum(unit * grad_unit, axis=-1, keepdims=True)
    return (grad_unit - unit * dot) / norms


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at component {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_rel_error(analytic, numeric, abs_floor=1e-9):
    """Largest per-component relative discrepancy.

    Components whose absolute discrepancy is within ``abs_floor`` count as
    agreeing, so tiny gradients are not judged on rounding noise.
    """
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= abs_floor, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max())
