"""Scaled dot-product attention and the context-aware (MCA2) block.

MCA2 mixes a primary stream's keys/values with projections of a context
stream ``M``; the mixing weights ``lambda_k``/``lambda_v`` are per-row gates.
All functions accept either a single sequence (n x d) or a batch (B x n x d).
"""
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .config import ConfigError
from .tensor import (DimensionError, Tensor, matmul, mul, reshape, scale, sigmoid,
                     softmax_rows, sub, transpose)

MASK_VALUE = -1e9


@dataclass
class ContextAttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    U_k: Tensor
    U_v: Tensor
    W_k1: Tensor
    W_v1: Tensor
    W_k2: Tensor
    W_v2: Tensor
    head_count: int = 1

    def __post_init__(self):
        d = self.W_q.shape[0]
        d_c = self.U_k.shape[0]
        expected = {
            "W_q": (d, d), "W_k": (d, d), "W_v": (d, d),
            "U_k": (d_c, d), "U_v": (d_c, d),
            "W_k1": (d, 1), "W_v1": (d, 1), "W_k2": (d, 1), "W_v2": (d, 1),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name}: expected {shape}, got {got}")
        if self.head_count < 1 or d % self.head_count:
            raise ConfigError(f"width {d} not divisible by {self.head_count} heads")

    @property
    def d(self):
        return self.W_q.shape[0]

    @property
    def d_c(self):
        return self.U_k.shape[0]

    def tensors(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "head_count"}


@dataclass
class AttentionOutput:
    fused: Tensor
    weights: Tensor
    lambda_k: Optional[Tensor] = None
    lambda_v: Optional[Tensor] = None
    k_m: Optional[Tensor] = None
    v_m: Optional[Tensor] = None


def _check_width(x, width, what):
    if x.shape[-1] != width:
        raise DimensionError(f"{what}: width {x.shape[-1]} does not match expected {width}")


def project_qkv(H, p):
    _check_width(H, p.d, "project_qkv")
    return matmul(H, p.W_q), matmul(H, p.W_k), matmul(H, p.W_v)


def context_gate_lambda(k, v, M, p):
    """Per-row gates: sigmoid(k W_k1 + (M U_k) W_k2), likewise for values."""
    _check_width(M, p.d_c, "context_gate_lambda")
    if M.shape[:-1] != k.shape[:-1] or v.shape != k.shape:
        raise DimensionError(f"context_gate_lambda: rows of M {M.shape} vs k {k.shape}, v {v.shape}")
    mk = matmul(M, p.U_k)
    mv = matmul(M, p.U_v)
    lam_k = sigmoid(matmul(k, p.W_k1) + matmul(mk, p.W_k2))
    lam_v = sigmoid(matmul(v, p.W_v1) + matmul(mv, p.W_v2))
    return lam_k, lam_v


def contextual_kv(k, v, M, lam_k, lam_v, p):
    """Convex row-wise mix of (k, v) with (M U_k, M U_v)."""
    _check_width(M, p.d_c, "contextual_kv")
    if M.shape[:-1] != k.shape[:-1]:
        raise DimensionError(f"contextual_kv: rows of M {M.shape} vs k {k.shape}")
    lam_k = lam_k if isinstance(lam_k, Tensor) else Tensor(lam_k)
    lam_v = lam_v if isinstance(lam_v, Tensor) else Tensor(lam_v)
    for lam in (lam_k, lam_v):
        if lam.shape[-1] != 1 or lam.shape[:-1] != k.shape[:-1]:
            raise DimensionError(f"contextual_kv: gate shape {lam.shape} vs rows {k.shape[:-1]}")
    k_m = mul(sub(1.0, lam_k), k) + mul(lam_k, matmul(M, p.U_k))
    v_m = mul(sub(1.0, lam_v), v) + mul(lam_v, matmul(M, p.U_v))
    return k_m, v_m


def attention_bias(n_q, n_k, causal=False, key_mask=None):
    """Additive pre-softmax bias of shape (B|1, 1, n_q, n_k), or None."""
    bias = None
    if causal:
        bias = np.triu(np.full((n_q, n_k), MASK_VALUE), k=1)[None, None]
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=np.float64)
        pad = np.where(km > 0, 0.0, MASK_VALUE)[:, None, None, :]
        bias = pad if bias is None else bias + pad
    return bias


def _split_heads(x, heads):
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def scaled_dot_attention(q, k, v, heads, causal=False, key_mask=None):
    """Multi-head softmax(q k^T / sqrt(d_head)) v with heads concatenated.

    ``key_mask`` (B x n_k, 1 = real) hides padded keys.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"width {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    single = q.ndim == 2
    if single:
        q, k, v = (reshape(t, (1,) + t.shape) for t in (q, k, v))
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scores = scale(matmul(qh, transpose(kh)), 1.0 / np.sqrt(d // heads))
    w = softmax_rows(scores, attention_bias(q.shape[1], k.shape[1], causal, key_mask))
    out = _merge_heads(matmul(w, vh))
    if single:
        out = reshape(out, out.shape[1:])
        w = reshape(w, w.shape[1:])
    return AttentionOutput(fused=out, weights=w)


def mca2_attend(H, M, p, key_mask=None, force_lambda=None):
    """Context-aware attention of primary stream ``H`` conditioned on ``M``.

    ``force_lambda`` replaces both learned gates by a constant (testing aid).
    """
    if M.shape[:-1] != H.shape[:-1]:
        raise DimensionError(f"mca2_attend: rows of H {H.shape} vs M {M.shape}")
    q, k, v = project_qkv(H, p)
    if force_lambda is None:
        lam_k, lam_v = context_gate_lambda(k, v, M, p)
    else:
        lam_k = lam_v = Tensor(np.full(k.shape[:-1] + (1,), float(force_lambda)))
    k_m, v_m = contextual_kv(k, v, M, lam_k, lam_v, p)
    out = scaled_dot_attention(q, k_m, v_m, p.head_count, key_mask=key_mask)
    out.lambda_k, out.lambda_v, out.k_m, out.v_m = lam_k, lam_v, k_m, v_m
    return out


def dpa_attend(H, M, p, key_mask=None):
    """Plain cross-attention: queries from ``H``, keys/values from ``M``."""
    _check_width(M, p.d_c, "dpa_attend")
    q = matmul(H, p.W_q)
    return scaled_dot_attention(q, matmul(M, p.U_k), matmul(M, p.U_v), p.head_count,
                                key_mask=key_mask)


@dataclass
class ProjectionParams:
    """Standard multi-head attention projections with output map."""
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor


def multi_head(x_q, x_kv, p, heads, causal=False, key_mask=None):
    q, k, v = matmul(x_q, p.W_q), matmul(x_kv, p.W_k), matmul(x_kv, p.W_v)
    out = scaled_dot_attention(q, k, v, heads, causal=causal, key_mask=key_mask)
    return matmul(out.fused, p.W_o), out.weights


__all__ = [
    "ContextAttentionParams", "AttentionOutput", "ProjectionParams", "ConfigError",
    "project_qkv", "context_gate_lambda", "contextual_kv", "scaled_dot_attention",
    "mca2_attend", "dpa_attend", "multi_head", "attention_bias",
]
