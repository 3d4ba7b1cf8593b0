"""Pure-Python/numpy reference kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Row-wise kernels take 2-D C-contiguous float64 arrays and work over the last
axis.
"""
from __future__ import annotations

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def softmax_fwd(x):
    y = x - x.max(axis=1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=1, keepdims=True)
    return y


def softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def layernorm_fwd(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0].copy()


def layernorm_bwd(xhat, rstd, dxhat):
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return (dxhat - m1 - xhat * m2) * rstd[:, None]


def gelu_fwd(x):
    inner = GELU_C * (x + GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, dy):
    x2 = x * x
    t = np.tanh(GELU_C * (x + GELU_A * x2 * x))
    dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def xent_fwd_bwd(logits, targets, weights):
    """Weighted softmax cross-entropy over rows.

    Returns ``(sum_i w_i * nll_i, d/dlogits of that sum)``.
    """
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    rows = np.arange(logits.shape[0])
    nll = np.log(s[:, 0]) - z[rows, targets]
    total = float((nll * weights).sum())
    grad = ez / s
    grad[rows, targets] -= 1.0
    grad *= weights[:, None]
    return total, grad


def lcs_length(a, b):
    """Length of the longest common subsequence of two int sequences."""
    n = len(b)
    if len(a) == 0 or n == 0:
        return 0
    prev = [0] * (n + 1)
    for x in a:
        cur = [0] * (n + 1)
        for j in range(n):
            if x == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = cur[j] if cur[j] > prev[j + 1] else prev[j + 1]
        prev = cur
    return prev[n]
