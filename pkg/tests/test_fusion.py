import numpy as np
import pytest

from mmfuse.attention import mca2_attend
from mmfuse.fusion import (ATTENTION_PAIRS, BUNDLE_KEYS, GLOBAL_GATES, SPOTLIGHT_GATES, GifParams,
                           SpotlightBundle, gif_fuse_bimodal, gif_fuse_trimodal, gif_gate, global_fuse,
                           spotlight)
from mmfuse.tensor import DimensionError, Tensor, grad_check, mul, parameter, tsum

from conftest import context_params, gif_params, rand_input, zero_gif


def scalar_gif(w1, w2, b):
    return GifParams(parameter(np.array([[w1], [w2]])), parameter(np.array([b])))


def full_params(rng, d, heads=1):
    attn = {p: context_params(rng, d, d, heads) for p in ATTENTION_PAIRS}
    gif = {g: gif_params(rng, d) for g in SPOTLIGHT_GATES}
    glob = {g: gif_params(rng, d) for g in GLOBAL_GATES}
    return attn, gif, glob


def test_zero_gate():
    H = Tensor(np.ones((2, 3)))
    assert not gif_gate(H, H, zero_gif(3)).data.any()
    assert np.all(gif_gate(H, H, zero_gif(3), gate_sigmoid=True).data == 0.5)


def test_scalar_gate_and_bimodal_fuse():
    p = scalar_gif(1.0, 1.0, 0.0)
    H, Hx = Tensor([[1.0]]), Tensor([[2.0]])
    assert gif_gate(H, Hx, p).data[0, 0] == 3.0
    assert gif_fuse_bimodal(H, Hx, p).data[0, 0] == 7.0


def test_bimodal_residual_identities(rng):
    H, Hx = rand_input(rng, 4, 3), rand_input(rng, 4, 3)
    assert np.array_equal(gif_fuse_bimodal(H, Hx, zero_gif(3)).data, H.data)
    assert np.array_equal(gif_fuse_bimodal(H, Tensor(np.zeros((4, 3))), gif_params(rng, 3)).data, H.data)


def test_gate_shape_checks(rng):
    with pytest.raises(DimensionError):
        gif_gate(rand_input(rng, 4, 3), rand_input(rng, 5, 3), gif_params(rng, 3))
    with pytest.raises(DimensionError):
        GifParams(parameter(np.zeros((3, 3))), parameter(np.zeros(3)))


def test_trimodal_reductions(rng):
    H, C1 = rand_input(rng, 4, 3), rand_input(rng, 4, 3)
    p1, p2 = gif_params(rng, 3), gif_params(rng, 3)
    assert np.array_equal(gif_fuse_trimodal(H, C1, rand_input(rng, 4, 3), zero_gif(3), zero_gif(3)).data, H.data)
    zero = Tensor(np.zeros((4, 3)))
    assert np.allclose(gif_fuse_trimodal(H, C1, zero, p1, p2).data, gif_fuse_bimodal(H, C1, p1).data, atol=1e-15)


def test_trimodal_scalar_all_ones():
    p = scalar_gif(1.0, 1.0, 1.0)
    one = Tensor([[1.0]])
    # gate = 1 + 1 + 1 = 3 for both context streams: 1 + 3 + 3
    assert gif_fuse_trimodal(one, one, one, p, p).data[0, 0] == 7.0


def test_spotlight_has_eight_members(rng):
    d, n = 4, 3
    attn, gif, _ = full_params(rng, d)
    b = spotlight(rand_input(rng, n, d), rand_input(rng, n, d), rand_input(rng, n, d), attn, gif)
    members = b.members()
    assert [k for k, _ in members] == list(BUNDLE_KEYS)
    assert len(members) == 8
    assert all(t.shape == (n, d) for _, t in members)


def test_spotlight_zero_gates_reproduce_primaries(rng):
    d, n = 4, 3
    attn, _, _ = full_params(rng, d)
    gif = {g: zero_gif(d) for g in SPOTLIGHT_GATES}
    Ht, Ha, Hv = (rand_input(rng, n, d) for _ in range(3))
    b = spotlight(Ht, Ha, Hv, attn, gif)
    for key, primary in (("H_Ta", Ht), ("H_Tv", Ht), ("H_Tav", Ht), ("H_tA", Ha), ("H_tAv", Ha),
                         ("H_tV", Hv), ("H_taV", Hv)):
        assert np.max(np.abs(getattr(b, key).data - primary.data)) <= 1e-12


def test_spotlight_matches_direct_composition(rng):
    d, n = 4, 2
    attn, gif, _ = full_params(rng, d)
    Ht, Ha, Hv = (rand_input(rng, n, d) for _ in range(3))
    b = spotlight(Ht, Ha, Hv, attn, gif)
    S = {"t": Ht, "a": Ha, "v": Hv}
    C = {p: mca2_attend(S[p[0]], S[p[2]], attn[p]).fused for p in ATTENTION_PAIRS}
    expect = {
        "H_Ta": gif_fuse_bimodal(Ht, C["t|a"], gif["Ta"]),
        "H_tA": gif_fuse_bimodal(Ha, C["a|t"], gif["tA"]),
        "H_Tv": gif_fuse_bimodal(Ht, C["t|v"], gif["Tv"]),
        "H_tV": gif_fuse_bimodal(Hv, C["v|t"], gif["tV"]),
        "H_Tav": gif_fuse_trimodal(Ht, C["t|a"], C["t|v"], gif["Tav.a"], gif["Tav.v"]),
        "H_tAv": gif_fuse_trimodal(Ha, C["a|t"], C["a|v"], gif["tAv.t"], gif["tAv.v"]),
        "H_taV": gif_fuse_trimodal(Hv, C["v|t"], C["v|a"], gif["taV.t"], gif["taV.a"]),
    }
    for key, t in expect.items():
        assert np.max(np.abs(getattr(b, key).data - t.data)) <= 1e-12


def test_spotlight_rejects_misaligned_streams(rng):
    attn, gif, _ = full_params(rng, 4)
    with pytest.raises(DimensionError):
        spotlight(rand_input(rng, 3, 4), rand_input(rng, 2, 4), rand_input(rng, 3, 4), attn, gif)


def test_global_fuse_all_zero_gates_is_zero(rng):
    d, n = 3, 4
    b = SpotlightBundle(*(rand_input(rng, n, d) for _ in BUNDLE_KEYS))
    out = global_fuse(b, {g: zero_gif(d) for g in GLOBAL_GATES})
    assert np.array_equal(out.data, np.zeros((n, d)))


def test_global_fuse_text_gate_one_recovers_h(rng):
    d, n = 3, 4
    b = SpotlightBundle(*(rand_input(rng, n, d) for _ in BUNDLE_KEYS))
    gates = {g: zero_gif(d) for g in GLOBAL_GATES}
    gates["t"] = zero_gif(d, bias=1.0)
    assert np.array_equal(global_fuse(b, gates).data, b.H.data)


def test_global_fuse_scalar_two_gates():
    one = lambda v: Tensor([[v]])
    b = SpotlightBundle(H=one(1.0), H_Ta=one(2.0), H_tA=one(5.0), H_Tv=one(5.0), H_tV=one(5.0),
                        H_Tav=one(5.0), H_tAv=one(5.0), H_taV=one(5.0))
    gates = {g: scalar_gif(0.0, 0.0, 0.0) for g in GLOBAL_GATES}
    gates["t"] = scalar_gif(0.0, 0.0, 2.0)   # g_t = 2
    gates["Ta"] = scalar_gif(1.0, 1.0, 0.0)  # g_Ta = H + H_Ta = 3
    assert global_fuse(b, gates).data[0, 0] == 2 * 1 + 3 * 2


def test_global_fuse_linear_in_member_with_frozen_gates(rng):
    d, n = 3, 4
    b = SpotlightBundle(*(rand_input(rng, n, d) for _ in BUNDLE_KEYS))
    gates = {g: gif_params(rng, d) for g in GLOBAL_GATES}
    g_ta = gif_gate(b.H, b.H_Ta, gates["Ta"]).data
    term = g_ta * b.H_Ta.data
    c = 2.5
    assert np.allclose(g_ta * (c * b.H_Ta.data), c * term, atol=1e-14)


def test_ta_subgraph_is_exact_subcomputation(rng):
    d, n = 4, 3
    attn, gif, glob = full_params(rng, d)
    Ht, Ha, Hv = (rand_input(rng, n, d) for _ in range(3))
    sub = spotlight(Ht, Ha, None, attn, gif, modalities="ta")
    assert sub.H_Tv is None and sub.H_Tav is None
    zeroed = dict(glob)
    for g in ("Tv", "tV", "Tav", "tAv", "taV"):
        zeroed[g] = zero_gif(d)
    full = spotlight(Ht, Ha, Tensor(np.zeros((n, d))), attn, gif)
    a = global_fuse(full, zeroed).data
    b = global_fuse(sub, glob).data
    assert np.allclose(a, b, atol=1e-12)


def test_spotlight_global_gradients(rng):
    d, n = 4, 2
    attn, gif, glob = full_params(rng, d)
    Ht, Ha, Hv = (rand_input(rng, n, d) for _ in range(3))
    R = Tensor(rng.standard_normal((n, d)))

    def loss():
        return tsum(mul(global_fuse(spotlight(Ht, Ha, Hv, attn, gif), glob), R))

    checked = 0
    for group in (attn, gif, glob):
        for key, holder in group.items():
            names = list(holder.tensors()) if hasattr(holder, "tensors") else ["W_gate", "b_gate"]
            for name in names:
                def f(x, holder=holder, name=name):
                    setattr(holder, name, x)
                    return loss()
                assert grad_check(f, Tensor(getattr(holder, name).data.copy())) < 1e-4, (key, name)
                checked += 1
    assert checked == 6 * 9 + 18 * 2
