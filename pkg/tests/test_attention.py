import math

import numpy as np
import pytest

from mmfuse.attention import (ContextAttentionParams, context_gate_lambda, contextual_kv, dpa_attend,
                              mca2_attend, project_qkv, scaled_dot_attention)
from mmfuse.config import ConfigError
from mmfuse.tensor import DimensionError, Tensor, backward, grad_check, mul, parameter, sigmoid, tsum

from conftest import context_params, rand_input


def ones_params(n=1):
    one = lambda *s: parameter(np.ones(s))
    return ContextAttentionParams(one(1, 1), one(1, 1), one(1, 1), one(1, 1), one(1, 1),
                                  one(1, 1), one(1, 1), one(1, 1), one(1, 1))


def test_identity_projections_return_h(rng):
    d = 3
    eye = lambda: parameter(np.eye(d))
    p = context_params(rng, d, 2)
    p.W_q, p.W_k, p.W_v = eye(), eye(), eye()
    H = rand_input(rng, 4, d)
    for t in project_qkv(H, p):
        assert np.array_equal(t.data, H.data)
    for t in project_qkv(Tensor(np.zeros((4, d))), p):
        assert not t.data.any()


def test_project_qkv_hand_case(rng):
    p = context_params(rng, 2, 2)
    p.W_q = parameter(np.array([[1.0, 2.0], [0.0, 1.0]]))
    q, _, _ = project_qkv(Tensor([[1.0, 1.0], [2.0, -1.0]]), p)
    assert q.data.tolist() == [[1.0, 3.0], [2.0, 3.0]]
    with pytest.raises(DimensionError):
        project_qkv(Tensor(np.zeros((2, 3))), p)


def test_lambda_half_when_gate_weights_zero(rng):
    p = context_params(rng, 4, 3)
    for w in (p.W_k1, p.W_v1, p.W_k2, p.W_v2):
        w.data[:] = 0
    k, v, M = rand_input(rng, 5, 4), rand_input(rng, 5, 4), rand_input(rng, 5, 3)
    lk, lv = context_gate_lambda(k, v, M, p)
    assert np.all(lk.data == 0.5) and np.all(lv.data == 0.5)


def test_lambda_scalar_closed_form():
    one = Tensor([[1.0]])
    lk, lv = context_gate_lambda(one, one, one, ones_params())
    assert abs(lk.data[0, 0] - 1 / (1 + math.exp(-2))) < 1e-15
    assert abs(lk.data[0, 0] - 0.880797) < 1e-6


def test_lambda_rows_mismatch(rng):
    p = context_params(rng, 4, 3)
    with pytest.raises(DimensionError):
        context_gate_lambda(rand_input(rng, 5, 4), rand_input(rng, 5, 4), rand_input(rng, 4, 3), p)
    with pytest.raises(DimensionError):
        context_gate_lambda(rand_input(rng, 5, 4), rand_input(rng, 5, 4), rand_input(rng, 5, 2), p)


def test_lambda_gradient_wrt_gate_weight(rng):
    p = context_params(rng, 4, 3)
    k, v, M = rand_input(rng, 5, 4), rand_input(rng, 5, 4), rand_input(rng, 5, 3)

    def f(w):
        p.W_k1 = w
        lk, _ = context_gate_lambda(k, v, M, p)
        return tsum(mul(lk, lk))

    assert grad_check(f, Tensor(p.W_k1.data.copy())) < 1e-4


def test_contextual_kv_degenerate_gates(rng):
    p = context_params(rng, 4, 3)
    k, v, M = rand_input(rng, 5, 4), rand_input(rng, 5, 4), rand_input(rng, 5, 3)
    zeros, ones = np.zeros((5, 1)), np.ones((5, 1))
    km, vm = contextual_kv(k, v, M, zeros, zeros, p)
    assert np.array_equal(km.data, k.data) and np.array_equal(vm.data, v.data)
    km, vm = contextual_kv(k, v, M, ones, ones, p)
    assert np.array_equal(km.data, M.data @ p.U_k.data) and np.array_equal(vm.data, M.data @ p.U_v.data)


def test_contextual_kv_scalar_mix():
    p = ones_params()
    p.U_k = parameter(np.array([[4.0]]))
    km, _ = contextual_kv(Tensor([[2.0]]), Tensor([[0.0]]), Tensor([[1.0]]),
                          np.array([[0.5]]), np.array([[0.5]]), p)
    assert km.data[0, 0] == 3.0


def test_single_key_attention_returns_v(rng):
    q, k, v = rand_input(rng, 1, 4), rand_input(rng, 1, 4), rand_input(rng, 1, 4)
    out = scaled_dot_attention(q, k, v, heads=2)
    assert np.allclose(out.fused.data, v.data, atol=1e-15)
    assert np.all(out.weights.data == 1.0)


def test_identical_keys_give_uniform_weights(rng):
    n = 5
    k = Tensor(np.tile(rng.standard_normal((1, 4)), (n, 1)))
    out = scaled_dot_attention(rand_input(rng, 3, 4), k, rand_input(rng, n, 4), heads=1)
    assert np.allclose(out.weights.data, 1 / n, atol=1e-15)


def test_two_key_hand_attention():
    q = Tensor([[1.0], [2.0]])
    k = Tensor([[0.5], [-1.0]])
    v = Tensor([[3.0], [7.0]])
    out = scaled_dot_attention(q, k, v, heads=1)
    for i, qi in enumerate((1.0, 2.0)):
        s = np.array([qi * 0.5, qi * -1.0])
        w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        assert abs(out.fused.data[i, 0] - (w[0] * 3 + w[1] * 7)) < 1e-12
        assert np.allclose(out.weights.data[0, i], w, atol=1e-12)


def test_heads_must_divide_width(rng):
    x = rand_input(rng, 2, 6)
    with pytest.raises(ConfigError):
        scaled_dot_attention(x, x, x, heads=4)


def test_causal_mask_zeroes_future(rng):
    x = rand_input(rng, 6, 4)
    w = scaled_dot_attention(x, x, x, heads=2, causal=True).weights.data
    assert np.all(w[:, np.triu_indices(6, 1)[0], np.triu_indices(6, 1)[1]] < 1e-40)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-9)


def test_mca2_lambda_zero_is_dot_product_attention(rng):
    p = context_params(rng, 4, 3, heads=2)
    H, M = rand_input(rng, 5, 4), rand_input(rng, 5, 3)
    out = mca2_attend(H, M, p, force_lambda=0.0)
    q, k, v = project_qkv(H, p)
    ref = scaled_dot_attention(q, k, v, 2)
    assert np.max(np.abs(out.fused.data - ref.fused.data)) <= 1e-12


def test_mca2_zero_context_matches_components(rng):
    p = context_params(rng, 4, 3)
    H, M = rand_input(rng, 5, 4), Tensor(np.zeros((5, 3)))
    out = mca2_attend(H, M, p)
    _, k, _ = project_qkv(H, p)
    lam = 1 / (1 + np.exp(-(k.data @ p.W_k1.data)))
    assert np.allclose(out.lambda_k.data, lam, atol=1e-15)
    assert np.allclose(out.k_m.data, (1 - lam) * k.data, atol=1e-15)
    assert np.all((out.lambda_k.data > 0) & (out.lambda_k.data < 1))


def test_mca2_saturated_gate_ignores_key_value_projections(rng):
    p = context_params(rng, 4, 3)
    H, M = rand_input(rng, 5, 4), rand_input(rng, 5, 3)
    a = mca2_attend(H, M, p, force_lambda=1.0).fused.data
    p.W_k.data += rng.standard_normal((4, 4))
    p.W_v.data += rng.standard_normal((4, 4))
    b = mca2_attend(H, M, p, force_lambda=1.0).fused.data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_mca2_weights_rows_sum_to_one(rng):
    p = context_params(rng, 6, 3, heads=3)
    out = mca2_attend(rand_input(rng, 7, 6), rand_input(rng, 7, 3), p)
    assert out.weights.shape == (3, 7, 7)
    assert np.allclose(out.weights.data.sum(axis=-1), 1.0, atol=1e-9)


def test_mca2_row_permutation_equivariance(rng):
    p = context_params(rng, 4, 3, heads=2)
    H, M = rand_input(rng, 6, 4), rand_input(rng, 6, 3)
    perm = rng.permutation(6)
    a = mca2_attend(H, M, p).fused.data
    b = mca2_attend(Tensor(H.data[perm]), Tensor(M.data[perm]), p).fused.data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_mca2_end_to_end_gradients(rng):
    p = context_params(rng, 4, 3, heads=2)
    H, M = rand_input(rng, 4, 4), rand_input(rng, 4, 3)
    R = Tensor(rng.standard_normal((4, 4)))
    for name, t in p.tensors().items():
        def f(x, name=name):
            setattr(p, name, x)
            return tsum(mul(mca2_attend(H, M, p).fused, R))
        assert grad_check(f, Tensor(t.data.copy())) < 1e-4, name


def test_dpa_uses_context_keys(rng):
    p = context_params(rng, 4, 3)
    H, M = rand_input(rng, 5, 4), rand_input(rng, 5, 3)
    out = dpa_attend(H, M, p)
    ref = scaled_dot_attention(Tensor(H.data @ p.W_q.data), Tensor(M.data @ p.U_k.data),
                               Tensor(M.data @ p.U_v.data), 1)
    assert np.allclose(out.fused.data, ref.fused.data, atol=1e-14)


def test_param_shape_validation(rng):
    p = context_params(rng, 4, 3)
    with pytest.raises(DimensionError):
        ContextAttentionParams(p.W_q, p.W_k, p.W_v, p.U_k, parameter(np.zeros((2, 4))),
                               p.W_k1, p.W_v1, p.W_k2, p.W_v2)
    with pytest.raises(ConfigError):
        ContextAttentionParams(*p.tensors().values(), head_count=3)
