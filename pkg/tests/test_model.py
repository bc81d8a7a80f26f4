import math

import numpy as np
import pytest

from mmfuse import data as D
from mmfuse import model as M
from mmfuse.config import ConfigError, ModelConfig, StreamConfig, TASK_CLASSES
from mmfuse.experiments import model_config_for
from mmfuse.fusion import gif_fuse_bimodal
from mmfuse.tensor import Tensor, backward, grad_check, layer_norm, matmul, no_grad, relu, reshape, tsum

TINY = dict(d=8, n_max=40, encoder_layers=1, decoder_layers=1, heads_text=2, ffn_mult=2, max_decode_len=10,
            audio=StreamConfig(1, 2, 4), video=StreamConfig(1, 2, 4), pe=StreamConfig(1, 2, 4))


@pytest.fixture(scope="module")
def corpus():
    spec = D.CorpusSpec(counts={"train": 24, "val": 4, "test": 4}, d_ca=4, d_cv=6, seed=2)
    gen = D.CorpusGenerator(spec)
    return gen, gen.generate()


def make_state(corpus, **over):
    gen, inst = corpus
    vocab = D.build_vocab(inst)
    cfg = model_config_for(inst, vocab, gen.variant_table, {**TINY, **over}, over.pop("seed", 0))
    return M.ModelState(cfg, vocab, gen.variant_table)


# ------------------------------------------------------------------ config and parameters

def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(d=0)
    with pytest.raises(ConfigError):
        ModelConfig(encoder_layers=2, fusion_insert=(2,))
    with pytest.raises(ConfigError):
        ModelConfig(d=10, heads_text=4)
    with pytest.raises(ConfigError):
        ModelConfig(video=StreamConfig(4, 8, 100))
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"nonsense": 1})
    assert ModelConfig(encoder_layers=3).fusion_insert == (2,)
    full = ModelConfig()
    assert (full.audio, full.video, full.pe) == (StreamConfig(4, 2, 154), StreamConfig(4, 8, 2048),
                                                    StreamConfig(4, 2, 154))


def test_config_dict_round_trip():
    c = ModelConfig(**TINY, mode="TA", fusion_insert=(0,))
    assert ModelConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("over", [
    dict(mode="T"), dict(mode="TA"), dict(mode="TV"), dict(mode="TAV"), dict(mode="concat"),
    dict(mode="DPA"), dict(mode="TAV", combine="gif"), dict(mode="TA", combine="sum", use_pe=False),
    dict(mode="TAV", encoder_layers=2, fusion_insert=(0, 1)),
])
def test_parameter_count_reproducible_from_config(corpus, over):
    s = make_state(corpus, **over)
    assert s.parameter_count() == M.expected_parameter_count(s.config)
    assert len(set(s.params)) == len(s.params)
    assert all(t.name == k for k, t in s.params.items())


def test_init_is_per_name_and_seeded(corpus):
    a = make_state(corpus, mode="TAV")
    b = make_state(corpus, mode="TAV")
    t = make_state(corpus, mode="T")
    for k in t.params:
        assert np.array_equal(a[k].data, t[k].data)
        assert np.array_equal(a[k].data, b[k].data)
    c = make_state(corpus, mode="TAV", seed=5)
    assert not np.array_equal(a["enc.0.attn.W_q"].data, c["enc.0.attn.W_q"].data)
    assert np.all(a["fusion.0.global.t.b_gate"].data == 1.0)
    bound = 1 / math.sqrt(8)
    assert np.all(np.abs(a["enc.0.attn.W_q"].data) <= bound)


# ------------------------------------------------------------------ encoders

def test_encode_text_shape_and_determinism(corpus):
    s = make_state(corpus)
    ids = [5, 6, 7]
    a = M.encode_text(ids, s)
    assert a.shape == (3, 8)
    assert np.array_equal(a.data, M.encode_text(ids, s).data)


def test_encode_text_errors(corpus):
    s = make_state(corpus)
    with pytest.raises(M.VocabularyError):
        M.encode_text([5, s.config.vocab_size], s)
    with pytest.raises(M.InputError):
        M.encode_text([5] * (s.config.n_max + 1), s)


def _ln(x, s, p):
    return layer_norm(Tensor(x), s[p + ".g"], s[p + ".b"]).data


def _ffn_np(x, s, p):
    h = np.maximum(x @ s[p + ".W1"].data + s[p + ".b1"].data, 0)
    return h @ s[p + ".W2"].data + s[p + ".b2"].data


def test_encode_text_matches_hand_composition(corpus):
    s = make_state(corpus, heads_text=1, use_pe=False, mode="T")
    ids = [7, 9]
    x = s["embed.tok"].data[ids] + M.sinusoidal_table(2, 8)
    p = "enc.0"
    q, k, v = (x @ s[f"{p}.attn.{w}"].data for w in ("W_q", "W_k", "W_v"))
    sc = q @ k.T / math.sqrt(8)
    w = np.exp(sc - sc.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    y = _ln(x + (w @ v) @ s[f"{p}.attn.W_o"].data, s, p + ".ln1")
    out = _ln(y + _ffn_np(y, s, p + ".ffn"), s, p + ".ln2")
    assert np.allclose(M.encode_text(ids, s).data, out, atol=1e-12)


def test_encode_modality_shape_and_single_frame(corpus):
    s = make_state(corpus)
    f = np.random.default_rng(0).standard_normal((5, 4))
    assert M.encode_modality(f, s, "audio").shape == (5, 4)
    one = f[:1]
    p = "audio.enc.0"
    y = _ln(one + one @ s[f"{p}.attn.W_v"].data @ s[f"{p}.attn.W_o"].data, s, p + ".ln1")
    expect = _ln(y + _ffn_np(y, s, p + ".ffn"), s, p + ".ln2")
    assert np.allclose(M.encode_modality(one, s, "audio").data, expect, atol=1e-12)


def test_encode_modality_width_mismatch(corpus):
    s = make_state(corpus)
    with pytest.raises(M.DimensionError):
        M.encode_modality(np.zeros((3, 5)), s, "audio")


def test_encode_modality_gradient(corpus):
    s = make_state(corpus)
    f = Tensor(np.random.default_rng(1).standard_normal((2, 4)))
    R = Tensor(np.random.default_rng(2).standard_normal((2, 4)))
    assert grad_check(lambda x: tsum(M.encode_modality(x, s, "audio") * R), f) < 1e-4
    W = s["audio.enc.0.attn.W_v"]

    def g(x):
        s.params["audio.enc.0.attn.W_v"] = x
        return tsum(M.encode_modality(f, s, "audio") * R)
    assert grad_check(g, Tensor(W.data.copy())) < 1e-4


def test_align_identity_broadcast_and_midpoints():
    rng = np.random.default_rng(3)
    eye = Tensor(np.eye(4))
    f = rng.standard_normal((5, 4))
    assert np.array_equal(M.align_modality(f, 5, eye).data, f)
    one = rng.standard_normal((1, 4))
    W = Tensor(rng.standard_normal((4, 6)))
    out = M.align_modality(one, 7, W).data
    assert np.allclose(out, np.tile(one @ W.data, (7, 1)), atol=1e-15)
    g = rng.standard_normal((3, 4))
    mid = M.align_modality(g, 5, eye).data
    expect = np.stack([g[0], (g[0] + g[1]) / 2, g[1], (g[1] + g[2]) / 2, g[2]])
    assert np.max(np.abs(mid - expect)) <= 1e-12
    with pytest.raises(M.InputError):
        M.align_modality(np.zeros((0, 4)), 3, eye)


# ------------------------------------------------------------------ fusion inside the model

def test_mode_t_equals_text_plus_pe_path(corpus):
    gen, inst = corpus
    s = make_state(corpus, mode="TAV")
    x = inst[0]
    b = M.make_batch([x], s, with_targets=False)
    pe = M.pe_stream(b, s)
    manual = M.encode_text(b.text, s, b.text_mask,
                           after_layer=lambda i, h: gif_fuse_bimodal(h, pe, s.gif("pe.gif")))
    got = M.fuse_forward(x, s, mode="T")
    assert np.array_equal(got.data, manual.data[0])


@pytest.mark.parametrize("mode", ["T", "TA", "TV", "TAV", "concat", "DPA"])
def test_all_modes_shape(corpus, mode):
    _, inst = corpus
    s = make_state(corpus, mode=mode)
    x = inst[1]
    n = len(M.input_ids(x, s)[0])
    assert M.fuse_forward(x, s).shape == (n, 8)


def _zero_fusion_gates(s, text_gate_bias):
    for k, t in s.params.items():
        if k.startswith("fusion.") and (".gif." in k or ".global." in k):
            t.data = np.zeros_like(t.data)
    s["fusion.0.global.t.b_gate"].data[:] = text_gate_bias


def test_zero_gates_with_open_text_gate_equal_mode_t(corpus):
    _, inst = corpus
    s = make_state(corpus, mode="TAV")
    _zero_fusion_gates(s, 1.0)
    x = inst[2]
    assert np.max(np.abs(M.fuse_forward(x, s).data - M.fuse_forward(x, s, mode="T").data)) <= 1e-9
    # without the forced text gate the fused stream has no residual path and collapses to zero
    _zero_fusion_gates(s, 0.0)
    assert not M.fuse_forward(x, s).data.any()


def test_missing_modality_is_input_error(corpus):
    _, inst = corpus
    s = make_state(corpus, mode="TAV")
    b = M.make_batch(inst[:2], s, with_targets=False)
    b.video = None
    with pytest.raises(M.InputError):
        M.fuse_batch(b, s)
    with pytest.raises(ConfigError):
        M.fuse_batch(b, s, mode="TA")


# ------------------------------------------------------------------ decoding

def test_greedy_length_and_determinism(corpus):
    _, inst = corpus
    s = make_state(corpus)
    H = M.fuse_forward(inst[0], s)
    a = M.decode_greedy(H, s)
    assert len(a) <= s.config.max_decode_len
    assert a == M.decode_greedy(H, s)


def _silence_decoder(s):
    for k, t in s.params.items():
        if k.startswith("dec.") and (k.endswith("W_o") or ".ffn.W2" in k):
            t.data = np.zeros_like(t.data)
    s["out.W"].data[:] = 0
    s["out.b"].data[:] = 0


def test_greedy_hand_trace(corpus):
    s = make_state(corpus)
    _silence_decoder(s)
    # BOS -> 5 -> 6 -> 7 -> EOS, routed through one embedding direction per token
    chain = [(D.BOS_ID, 5), (5, 6), (6, 7), (7, D.EOS_ID)]
    for j, (tok, nxt) in enumerate(chain):
        s["embed.tok"].data[tok] = 0.0
        s["embed.tok"].data[tok, j] = 1000.0
        s["out.W"].data[j, nxt] = 10.0
    H = M.fuse_forward(D.MultimodalInstance(*corpus[1][0].__dict__.values()), s)
    assert M.decode_greedy(H, s) == [5, 6, 7]


def test_greedy_ties_break_to_lowest_id(corpus):
    s = make_state(corpus)
    _silence_decoder(s)
    s["out.b"].data[[9, 6, 8]] = 5.0
    H = M.fuse_forward(corpus[1][0], s)
    assert M.decode_greedy(H, s) == [6] * s.config.max_decode_len
    s["out.b"].data[D.EOS_ID] = 6.0
    assert M.decode_greedy(H, s) == []


# ------------------------------------------------------------------ training

def test_untrained_loss_near_log_vocab(corpus):
    _, inst = corpus
    s = make_state(corpus)
    b = M.make_batch(inst[:8], s)
    with no_grad():
        loss, _ = M.generation_loss(b, s)
    ln_v = math.log(s.config.vocab_size)
    assert abs(float(loss.data) - ln_v) <= 0.15 * ln_v


def test_loss_decreases_on_memorization_set(corpus):
    _, inst = corpus
    s = make_state(corpus)
    batch = inst[:16]
    losses = [M.train_step(batch, s, 1e-3, 1e-4) for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_zero_lr_and_decay_leave_parameters(corpus):
    _, inst = corpus
    s = make_state(corpus)
    before = {k: t.data.copy() for k, t in s.params.items()}
    M.train_step(inst[:4], s, 0.0, 0.0)
    assert all(np.array_equal(before[k], t.data) for k, t in s.params.items())


def test_train_step_input_errors(corpus):
    _, inst = corpus
    s = make_state(corpus)
    with pytest.raises(M.InputError):
        M.train_step([], s, 1e-3, 0.0)
    bad = D.MultimodalInstance(inst[0].context, inst[0].target, inst[0].audio_features,
                               inst[0].video_features, explanation=[])
    with pytest.raises(M.InputError):
        M.train_step([bad], s, 1e-3, 0.0)


def test_end_to_end_gradient_on_sampled_parameters(corpus):
    _, inst = corpus
    s = make_state(corpus, mode="TAV")
    b = M.make_batch(inst[:2], s)
    rng = np.random.default_rng(7)
    entries = [(k, i) for k, t in s.params.items() for i in range(t.data.size)]
    picks = [entries[j] for j in rng.choice(len(entries), size=max(30, len(entries) // 100), replace=False)]
    s.zero_grad()
    loss, _ = M.generation_loss(b, s)
    backward(loss)
    h = 1e-5
    worst = 0.0
    with no_grad():
        for k, i in picks:
            flat = s[k].data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            fp = float(M.generation_loss(b, s)[0].data)
            flat[i] = orig - h
            fm = float(M.generation_loss(b, s)[0].data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = s[k].grad.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    assert worst < 1e-4


def test_padding_invariance(corpus):
    _, inst = corpus
    s = make_state(corpus, mode="TAV")
    x = min(inst, key=lambda i: len(M.input_ids(i, s)[0]))
    longest = max(inst, key=lambda i: len(M.input_ids(i, s)[0]))
    alone = M.make_batch([x], s)
    padded = M.make_batch([x, longest], s)
    assert padded.text.shape[1] > alone.text.shape[1]
    with no_grad():
        la = M.generation_loss(alone, s)[1].data[0]
        lp = M.generation_loss(padded, s)[1].data[0]
    n = alone.dec_in.shape[1]
    assert np.max(np.abs(la - lp[:n])) < 1e-10
    assert M.generate([x], s) == M.generate([x, longest], s)[:1]


# ------------------------------------------------------------------ affect head

def test_affect_logit_sizes(corpus):
    _, inst = corpus
    s = make_state(corpus)
    for task, classes in TASK_CLASSES.items():
        label, logits = M.classify_affect(inst[0], None, s, task)
        assert logits.shape == (len(classes),) and label in classes


def test_empty_explanation_equals_plain_path(corpus):
    _, inst = corpus
    s = make_state(corpus)
    _, a = M.classify_affect(inst[0], None, s, "emotion")
    _, b = M.classify_affect(inst[0], [], s, "emotion")
    assert a.tobytes() == b.tobytes()
    _, c = M.classify_affect(inst[0], inst[0].explanation, s, "emotion")
    assert c.tobytes() != a.tobytes()


def test_overlong_input_truncates_context_from_left(corpus):
    _, inst = corpus
    x = max(inst, key=lambda i: sum(len(u) + 2 for _, u in i.context))
    ctx, keep = M.dialogue_tokens(x, x.explanation)
    budget = len(keep) + 3
    assert len(ctx) > 3
    s = make_state(corpus, n_max=budget)
    ids, truncated = M.input_ids(x, s, x.explanation)
    assert truncated and len(ids) == budget
    assert ids[-len(keep):] == s.vocab.encode(keep)
    assert ids[:3] == s.vocab.encode(ctx[-3:])
    _, n_trunc = M.predict_affect([x], [x.explanation], s, "sarcasm")
    assert n_trunc == 1
