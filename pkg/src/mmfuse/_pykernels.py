"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature. Inputs are 2-D float64 arrays whose rows are independent.
"""
import numpy as np


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_rows(x, eps):
    """Return (normalized rows, reciprocal std per row)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def layer_norm_rows_backward(xhat, rstd, gxhat):
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    return (gxhat - m1 - xhat * m2) * rstd[:, None]


def lcs_length(a, b):
    """Longest common subsequence length of two int64 sequences."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = [0] * (m + 1)
    for i in range(n):
        cur = [0] * (m + 1)
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = cur[j] if cur[j] > prev[j + 1] else prev[j + 1]
        prev = cur
    return prev[m]


def interp_matrix(src_len, dst_len):
    """Row-stochastic (dst_len x src_len) linear time-interpolation weights."""
    w = np.zeros((dst_len, src_len))
    if src_len == 1 or dst_len == 1:
        w[:, :] = 1.0 / src_len
        return w
    for i in range(dst_len):
        p = i * (src_len - 1) / (dst_len - 1)
        lo = int(np.floor(p))
        if lo >= src_len - 1:
            w[i, src_len - 1] = 1.0
            continue
        frac = p - lo
        w[i, lo] = 1.0 - frac
        w[i, lo + 1] += frac
    return w
