"""Hand-rolled oracles shared across the test suite.

These stay loop-based and independent of the library's vectorized paths on
purpose: they are the other side of every equivalence check.
"""

import math

import numpy as np

from gsaformer.tensor import ComputationTape, backward


def naive_matmul(a, b):
    r, s = a.shape
    _, t = b.shape
    out = np.zeros((r, t))
    for i in range(r):
        for j in range(t):
            acc = 0.0
            for k in range(s):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def naive_attention(q, k, v, allow=None, scale=True):
    """Explicit per-pair dot products and explicit softmax."""
    n_q, d = q.shape
    n_k = k.shape[0]
    scores = np.zeros((n_q, n_k))
    for i in range(n_q):
        for j in range(n_k):
            scores[i, j] = sum(q[i, c] * k[j, c] for c in range(d))
    if scale:
        scores /= math.sqrt(d)
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        cols = [j for j in range(n_k) if allow is None or allow[i, j]]
        if not cols:
            continue
        row = scores[i, cols]
        e = np.exp(row - row.max())
        w = e / e.sum()
        for wj, j in zip(w, cols):
            out[i] += wj * v[j]
    return out


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def fd_grad(loss_fn, param, eps=1e-6):
    """Central differences over every coordinate of param."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for c in range(flat.size):
        keep = flat[c]
        flat[c] = keep + eps
        f_plus = float(loss_fn().data[0, 0])
        flat[c] = keep - eps
        f_minus = float(loss_fn().data[0, 0])
        flat[c] = keep
        grad[c] = (f_plus - f_minus) / (2 * eps)
    return grad.reshape(param.data.shape)


def check_op_gradients(build_loss, params, tol=1e-5):
    """Analytic grads of a recorded op graph vs central differences."""
    for p in params:
        p.zero_grad()
    with ComputationTape() as tape:
        loss = build_loss()
        backward(loss, tape)
    for p in params:
        numeric = fd_grad(build_loss, p)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(rel_err(a, n) for a, n in
                    zip(analytic.reshape(-1), numeric.reshape(-1)))
        assert worst < tol, f"gradient mismatch: {worst}"
