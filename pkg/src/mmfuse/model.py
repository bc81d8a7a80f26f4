"""Encoder-decoder explanation generator with the multimodal fusion stack.

Parameters live in one ordered ``name -> Tensor`` dict on ``ModelState``;
each is initialised from its own seed stream derived from (seed, name), so a
parameter's initial value does not depend on which other parameters exist.
"""
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import data as D
from .attention import ContextAttentionParams, ProjectionParams, dpa_attend, mca2_attend, multi_head
from .config import TASK_CLASSES, ConfigError, ModelConfig
from .fusion import (ATTENTION_PAIRS, GLOBAL_GATES, SPOTLIGHT_GATES, GifParams, global_fuse,
                     gif_fuse_bimodal, gif_fuse_trimodal, spotlight)
from .kernels import interp_matrix
from .tensor import (DimensionError, Tensor, backward, concat, cross_entropy, embedding, layer_norm,
                     masked_mean_rows, matmul, no_grad, parameter, relu, reshape)


class VocabularyError(IndexError):
    pass


class InputError(ValueError):
    pass


def sinusoidal_table(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _init(seed, name, shape, kind):
    if kind == "ones":
        return np.ones(shape)
    if kind == "zeros":
        return np.zeros(shape)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))
    fan_in = 1 if kind == "embed" else shape[0]
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def phonetic_index(vocab, variants):
    """Map each vocabulary id to a phonetic-key id; returns (ids, number of keys)."""
    keys = {}
    ids = np.zeros(len(vocab), dtype=np.int64)
    for i, tok in enumerate(vocab.itos):
        k = tok if tok in D.RESERVED else D.phonetic_key(tok, variants)
        ids[i] = keys.setdefault(k, len(keys))
    return ids, len(keys)


def _pair_name(pair):
    return pair.replace("|", "_")


class ModelState:
    """Parameters plus the vocabularies needed to run them."""

    def __init__(self, config: ModelConfig, vocab: D.Vocab, variants: Optional[D.VariantTable] = None,
                 params: Optional[Dict[str, np.ndarray]] = None):
        if config.vocab_size != len(vocab):
            raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self.variants = variants or D.VariantTable()
        self.pe_ids, n_keys = phonetic_index(vocab, self.variants)
        if config.use_pe and n_keys > config.pe_vocab_size:
            raise ConfigError(f"pe_vocab_size {config.pe_vocab_size} < {n_keys} phonetic keys")
        self.params: Dict[str, Tensor] = {}
        self._build()
        if params is not None:
            missing = set(self.params) - set(params)
            extra = set(params) - set(self.params)
            if missing or extra:
                raise ConfigError(f"parameter set mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
            for k, v in params.items():
                if v.shape != self.params[k].shape:
                    raise ConfigError(f"{k}: shape {v.shape} != {self.params[k].shape}")
                self.params[k].data = np.array(v, dtype=np.float64)
                self.params[k].grad = np.zeros_like(self.params[k].data)
        self.pos = sinusoidal_table(max(config.n_max, config.max_decode_len + 2), config.d)
        self.optimizer = None

    # ------------------------------------------------------------ construction

    def _add(self, name, shape, kind="uniform"):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        self.params[name] = parameter(_init(self.config.seed, name, shape, kind), name=name)

    def _add_ln(self, prefix, d):
        self._add(prefix + ".g", (d,), "ones")
        self._add(prefix + ".b", (d,), "zeros")

    def _add_attn(self, prefix, d):
        for w in ("W_q", "W_k", "W_v", "W_o"):
            self._add(f"{prefix}.{w}", (d, d))

    def _add_ffn(self, prefix, d):
        h = d * self.config.ffn_mult
        self._add(prefix + ".W1", (d, h))
        self._add(prefix + ".b1", (h,), "zeros")
        self._add(prefix + ".W2", (h, d))
        self._add(prefix + ".b2", (d,), "zeros")

    def _add_encoder(self, prefix, layers, d):
        for i in range(layers):
            p = f"{prefix}.{i}"
            self._add_attn(p + ".attn", d)
            self._add_ln(p + ".ln1", d)
            self._add_ffn(p + ".ffn", d)
            self._add_ln(p + ".ln2", d)

    def _add_gif(self, prefix, d, bias="zeros"):
        self._add(prefix + ".W_gate", (2 * d, d))
        self._add(prefix + ".b_gate", (d,), bias)

    def _add_context_attn(self, prefix, d, d_c):
        for w in ("W_q", "W_k", "W_v"):
            self._add(f"{prefix}.{w}", (d, d))
        for w in ("U_k", "U_v"):
            self._add(f"{prefix}.{w}", (d_c, d))
        for w in ("W_k1", "W_v1", "W_k2", "W_v2"):
            self._add(f"{prefix}.{w}", (d, 1))

    def fusion_pairs(self):
        c = self.config
        if c.mode in ("T", "concat"):
            return ()
        if c.combine == "spotlight":
            return {"TA": ("t|a", "a|t"), "TV": ("t|v", "v|t")}.get(c.mode, ATTENTION_PAIRS)
        return {"TA": ("t|a",), "TV": ("t|v",)}.get(c.mode, ("t|a", "t|v"))

    def _build(self):
        c = self.config
        d = c.d
        self._add("embed.tok", (c.vocab_size, d), "embed")
        self._add_encoder("enc", c.encoder_layers, d)
        for i in range(c.decoder_layers):
            p = f"dec.{i}"
            self._add_attn(p + ".self", d)
            self._add_ln(p + ".ln1", d)
            self._add_attn(p + ".cross", d)
            self._add_ln(p + ".ln2", d)
            self._add_ffn(p + ".ffn", d)
            self._add_ln(p + ".ln3", d)
        self._add("out.W", (d, c.vocab_size))
        self._add("out.b", (c.vocab_size,), "zeros")
        for task, classes in TASK_CLASSES.items():
            self._add(f"affect.{task}.W", (d, len(classes)))
            self._add(f"affect.{task}.b", (len(classes),), "zeros")
        if c.use_pe:
            self._add("pe.embed", (c.pe_vocab_size, c.pe.d_c), "embed")
            self._add_encoder("pe.enc", c.pe.layers, c.pe.d_c)
            self._add("pe.proj.W", (c.pe.d_c, d))
            self._add("pe.proj.b", (d,), "zeros")
            self._add_gif("pe.gif", d)
        for name in ("audio", "video"):
            if (name == "audio" and c.uses_audio) or (name == "video" and c.uses_video):
                sc = getattr(c, name)
                self._add_encoder(f"{name}.enc", sc.layers, sc.d_c)
                self._add(f"{name}.proj.W", (sc.d_c, d))
                self._add(f"{name}.proj.b", (d,), "zeros")
        for li in c.fusion_insert:
            p = f"fusion.{li}"
            if c.mode == "T":
                break
            if c.mode == "concat":
                self._add(p + ".concat.W", (3 * d, d))
                self._add(p + ".concat.b", (d,), "zeros")
                continue
            for pair in self.fusion_pairs():
                self._add_context_attn(f"{p}.attn.{_pair_name(pair)}", d, d)
            if c.combine == "spotlight":
                gates = {"TA": ("Ta", "tA"), "TV": ("Tv", "tV")}.get(c.mode, SPOTLIGHT_GATES)
                for g in gates:
                    self._add_gif(f"{p}.gif.{g}", d)
                glob = {"TA": ("t", "Ta", "tA"), "TV": ("t", "Tv", "tV")}.get(c.mode, GLOBAL_GATES)
                for g in glob:
                    # text gate starts open so the fused stream begins near H
                    self._add_gif(f"{p}.global.{g}", d, "ones" if g == "t" else "zeros")
            elif c.combine == "gif":
                for m in {"TA": ("a",), "TV": ("v",)}.get(c.mode, ("a", "v")):
                    self._add_gif(f"{p}.gif.T.{m}", d)

    # ------------------------------------------------------------ views

    def __getitem__(self, name):
        return self.params[name]

    def parameter_count(self):
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def proj(self, prefix):
        g = self.params
        return ProjectionParams(g[prefix + ".W_q"], g[prefix + ".W_k"], g[prefix + ".W_v"], g[prefix + ".W_o"])

    def context_attn(self, prefix):
        g = self.params
        return ContextAttentionParams(*(g[f"{prefix}.{w}"] for w in
                                        ("W_q", "W_k", "W_v", "U_k", "U_v", "W_k1", "W_v1", "W_k2", "W_v2")),
                                      head_count=self.config.heads_text)

    def gif(self, prefix):
        return GifParams(self.params[prefix + ".W_gate"], self.params[prefix + ".b_gate"])


def expected_parameter_count(config: ModelConfig):
    """Closed-form parameter count for ``config`` (independent of ModelState)."""
    c = config
    d = c.d

    def enc(layers, w):
        return layers * (4 * w * w + 2 * w + (w * w * c.ffn_mult * 2 + w * c.ffn_mult + w) + 2 * w)

    n = c.vocab_size * d + enc(c.encoder_layers, d)
    n += c.decoder_layers * (8 * d * d + 6 * d + 2 * d * d * c.ffn_mult + d * c.ffn_mult + d)
    n += d * c.vocab_size + c.vocab_size
    n += sum((d + 1) * len(v) for v in TASK_CLASSES.values())
    gif = 2 * d * d + d
    if c.use_pe:
        n += c.pe_vocab_size * c.pe.d_c + enc(c.pe.layers, c.pe.d_c) + c.pe.d_c * d + d + gif
    if c.uses_audio:
        n += enc(c.audio.layers, c.audio.d_c) + c.audio.d_c * d + d
    if c.uses_video:
        n += enc(c.video.layers, c.video.d_c) + c.video.d_c * d + d
    per_insert = 0
    if c.mode == "concat":
        per_insert = 3 * d * d + d
    elif c.mode != "T":
        cab = 3 * d * d + 2 * d * d + 4 * d
        bi = c.mode in ("TA", "TV")
        if c.combine == "spotlight":
            per_insert = (2 if bi else 6) * cab + (2 if bi else 10) * gif + (3 if bi else 8) * gif
        else:
            per_insert = (1 if bi else 2) * cab
            if c.combine == "gif":
                per_insert += (1 if bi else 2) * gif
    n += per_insert * len(c.fusion_insert)
    return n


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    text: np.ndarray          # B x n token ids
    text_mask: np.ndarray     # B x n
    pe: np.ndarray            # B x n phonetic-key ids
    audio: Optional[np.ndarray] = None   # B x La x d_ca
    audio_mask: Optional[np.ndarray] = None
    audio_interp: Optional[np.ndarray] = None  # B x n x La
    video: Optional[np.ndarray] = None
    video_mask: Optional[np.ndarray] = None
    video_interp: Optional[np.ndarray] = None
    dec_in: Optional[np.ndarray] = None  # B x T
    dec_out: Optional[np.ndarray] = None
    dec_mask: Optional[np.ndarray] = None
    truncated: int = 0


def dialogue_tokens(inst, explanation=None):
    """(context tokens, protected tokens): protected = target (+ SEP + explanation)."""
    ctx = []
    for spk, toks in inst.context:
        ctx += [spk] + list(toks) + [D.SEP]
    keep = [inst.target[0]] + list(inst.target[1])
    if explanation:
        keep += [D.SEP] + list(explanation)
    return ctx, keep


def input_ids(inst, s: ModelState, explanation=None):
    """Token ids for the encoder, left-truncating context to ``n_max``.

    Returns (ids, truncated_flag).
    """
    ctx, keep = dialogue_tokens(inst, explanation)
    toks = ctx + keep
    n_max = s.config.n_max
    truncated = len(toks) > n_max
    if truncated:
        toks = toks[-n_max:]
    return s.vocab.encode(toks), truncated


def _pad(seqs, value=0):
    n = max(len(x) for x in seqs)
    out = np.full((len(seqs), n), value, dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for i, x in enumerate(seqs):
        out[i, :len(x)] = x
        mask[i, :len(x)] = 1.0
    return out, mask


def _pad_features(mats, lengths_to):
    L = max(m.shape[0] for m in mats)
    width = mats[0].shape[1]
    feats = np.zeros((len(mats), L, width))
    mask = np.zeros((len(mats), L))
    n = max(lengths_to)
    interp = np.zeros((len(mats), n, L))
    for i, (m, nt) in enumerate(zip(mats, lengths_to)):
        if m.shape[1] != width:
            raise DimensionError(f"feature width {m.shape[1]} != {width} within a batch")
        feats[i, :m.shape[0]] = m
        mask[i, :m.shape[0]] = 1.0
        interp[i, :nt, :m.shape[0]] = interp_matrix(m.shape[0], nt)
    return feats, mask, interp


def make_batch(instances, s: ModelState, explanations=None, with_targets=True):
    """Batch for ``instances``; ``explanations`` (per instance or None) are appended to the input."""
    if not instances:
        raise InputError("empty batch")
    c = s.config
    ids, trunc = [], 0
    for k, inst in enumerate(instances):
        expl = explanations[k] if explanations is not None else None
        x, t = input_ids(inst, s, expl)
        ids.append(x)
        trunc += int(t)
    text, mask = _pad(ids, D.PAD_ID)
    b = Batch(text=text, text_mask=mask, pe=s.pe_ids[text], truncated=trunc)
    lengths = [len(x) for x in ids]
    if c.uses_audio:
        b.audio, b.audio_mask, b.audio_interp = _pad_features([i.audio_features for i in instances], lengths)
    if c.uses_video:
        b.video, b.video_mask, b.video_interp = _pad_features([i.video_features for i in instances], lengths)
    if with_targets:
        seqs = []
        for inst in instances:
            if not inst.explanation:
                raise InputError("instance has an empty explanation")
            e = s.vocab.encode(inst.explanation)[: c.max_decode_len]
            seqs.append(e)
        dec_in, dmask = _pad([[D.BOS_ID] + e for e in seqs], D.PAD_ID)
        dec_out, _ = _pad([e + [D.EOS_ID] for e in seqs], D.PAD_ID)
        b.dec_in, b.dec_out, b.dec_mask = dec_in, dec_out, dmask
    return b


# ------------------------------------------------------------------ encoders

def _ffn(x, s, p):
    g = s.params
    return matmul(relu(matmul(x, g[p + ".W1"]) + g[p + ".b1"]), g[p + ".W2"]) + g[p + ".b2"]


def encoder_stack(x, s, prefix, layers, heads, mask, after_layer=None):
    g = s.params
    for i in range(layers):
        p = f"{prefix}.{i}"
        a, _ = multi_head(x, x, s.proj(p + ".attn"), heads, key_mask=mask)
        x = layer_norm(x + a, g[p + ".ln1.g"], g[p + ".ln1.b"])
        x = layer_norm(x + _ffn(x, s, p + ".ffn"), g[p + ".ln2.g"], g[p + ".ln2.b"])
        if after_layer is not None:
            x = after_layer(i, x)
    return x


def embed_text(ids, s):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= s.config.vocab_size):
        raise VocabularyError(f"token id outside [0, {s.config.vocab_size})")
    n = ids.shape[-1]
    if n > s.pos.shape[0]:
        raise InputError(f"sequence length {n} exceeds positional table {s.pos.shape[0]}")
    return embedding(s["embed.tok"], ids) + Tensor(s.pos[:n])


def encode_text(tokens, s, mask=None, after_layer=None):
    """Text encoder. ``tokens`` is one id sequence (-> n x d) or a padded batch (-> B x n x d)."""
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        if len(ids) > s.config.n_max:
            raise InputError(f"{len(ids)} tokens exceed n_max {s.config.n_max}")
        ids = ids[None]
        mask = np.ones(ids.shape)
    elif mask is None:
        mask = (ids != D.PAD_ID).astype(np.float64)
    x = embed_text(ids, s)
    x = encoder_stack(x, s, "enc", s.config.encoder_layers, s.config.heads_text, mask, after_layer)
    return reshape(x, x.shape[1:]) if single else x


def encode_modality(features, s, name, mask=None):
    """Self-attention encoder over a feature sequence; width preserved."""
    sc = getattr(s.config, name)
    f = features if isinstance(features, Tensor) else Tensor(features)
    if f.shape[-1] != sc.d_c:
        raise DimensionError(f"{name} features have width {f.shape[-1]}, encoder expects {sc.d_c}")
    single = f.ndim == 2
    if single:
        if f.shape[0] < 1:
            raise InputError("empty feature sequence")
        f = reshape(f, (1,) + f.shape)
        mask = np.ones((1, f.shape[1]))
    x = encoder_stack(f, s, f"{name}.enc", sc.layers, sc.heads, mask)
    return reshape(x, x.shape[1:]) if single else x


def align_modality(features, n, proj_W, proj_b=None, interp=None):
    """Linear time-interpolation of L frames onto n positions, then projection to width d."""
    f = features if isinstance(features, Tensor) else Tensor(features)
    if interp is None:
        if f.ndim != 2 or f.shape[0] < 1 or n < 1:
            raise InputError(f"align_modality needs L >= 1 frames and n >= 1, got {f.shape}, n={n}")
        interp = interp_matrix(f.shape[0], n)
    out = matmul(matmul(Tensor(interp), f), proj_W)
    return out + proj_b if proj_b is not None else out


def pe_stream(b: Batch, s):
    c = s.config
    x = embedding(s["pe.embed"], b.pe) + Tensor(sinusoidal_table(b.pe.shape[1], c.pe.d_c))
    x = encoder_stack(x, s, "pe.enc", c.pe.layers, c.pe.heads, b.text_mask)
    return matmul(x, s["pe.proj.W"]) + s["pe.proj.b"]


def modality_streams(b: Batch, s):
    out = {}
    for name in ("audio", "video"):
        feats = getattr(b, name)
        if feats is None:
            continue
        enc = encode_modality(feats, s, name, getattr(b, name + "_mask"))
        out[name] = align_modality(enc, b.text.shape[1], s[f"{name}.proj.W"], s[f"{name}.proj.b"],
                                   getattr(b, name + "_interp"))
    return out


def apply_fusion(H, layer, streams, s, mode, mask):
    c = s.config
    p = f"fusion.{layer}"
    if mode == "T":
        return H
    if mode == "concat":
        cat = concat([H, streams["audio"], streams["video"]], axis=-1)
        return matmul(cat, s[p + ".concat.W"]) + s[p + ".concat.b"]
    need = {"TA": ("audio",), "TV": ("video",)}.get(mode, ("audio", "video"))
    for m in need:
        if m not in streams:
            raise InputError(f"mode {mode} needs the {m} stream")
    A, V = streams.get("audio"), streams.get("video")
    attention = "dpa" if mode == "DPA" else c.attention
    attn = {pair: s.context_attn(f"{p}.attn.{_pair_name(pair)}") for pair in s.fusion_pairs()}
    if c.combine == "spotlight":
        mods = {"TA": "ta", "TV": "tv"}.get(mode, "tav")
        gates = {k[len(p) + 5:-7]: s.gif(k[:-7]) for k in s.params
                 if k.startswith(p + ".gif.") and k.endswith(".W_gate")}
        glob = {k[len(p) + 8:-7]: s.gif(k[:-7]) for k in s.params
                if k.startswith(p + ".global.") and k.endswith(".W_gate")}
        bundle = spotlight(H, A, V, attn, gates, c.gate_sigmoid, attention, mask, mods)
        return global_fuse(bundle, glob, c.gate_sigmoid)
    attend = mca2_attend if attention == "mca2" else dpa_attend
    ctx = {}
    if "audio" in need:
        ctx["a"] = attend(H, A, attn["t|a"], key_mask=mask).fused
    if "video" in need:
        ctx["v"] = attend(H, V, attn["t|v"], key_mask=mask).fused
    if c.combine == "sum":
        out = H
        for m in ("a", "v"):
            if m in ctx:
                out = out + ctx[m]
        return out
    keys = [m for m in ("a", "v") if m in ctx]
    if len(keys) == 1:
        return gif_fuse_bimodal(H, ctx[keys[0]], s.gif(f"{p}.gif.T.{keys[0]}"), c.gate_sigmoid)
    return gif_fuse_trimodal(H, ctx["a"], ctx["v"], s.gif(f"{p}.gif.T.a"), s.gif(f"{p}.gif.T.v"),
                             c.gate_sigmoid)


def fuse_batch(b: Batch, s, mode=None):
    """Encoder output after PE and multimodal fusion: B x n x d."""
    c = s.config
    mode = mode or c.mode
    if mode != c.mode and mode != "T":
        raise ConfigError(f"state was built for mode {c.mode}, cannot run {mode}")
    streams = modality_streams(b, s) if mode != "T" else {}
    pe = pe_stream(b, s) if c.use_pe else None
    last = c.encoder_layers - 1

    def after(i, x):
        if i == last and pe is not None:
            x = gif_fuse_bimodal(x, pe, s.gif("pe.gif"), c.gate_sigmoid)
        if i in c.fusion_insert:
            x = apply_fusion(x, i, streams, s, mode, b.text_mask)
        return x

    return encode_text(b.text, s, b.text_mask, after_layer=after)


def fuse_forward(instance, s, mode=None):
    """Fused representation (n x d) of a single instance."""
    b = make_batch([instance], s, with_targets=False)
    out = fuse_batch(b, s, mode)
    return reshape(out, out.shape[1:])


# ------------------------------------------------------------------ decoder

def decoder_logits(dec_in, H_all, enc_mask, s):
    c = s.config
    g = s.params
    x = embed_text(dec_in, s)
    for i in range(c.decoder_layers):
        p = f"dec.{i}"
        a, _ = multi_head(x, x, s.proj(p + ".self"), c.heads_text, causal=True)
        x = layer_norm(x + a, g[p + ".ln1.g"], g[p + ".ln1.b"])
        a, _ = multi_head(x, H_all, s.proj(p + ".cross"), c.heads_text, key_mask=enc_mask)
        x = layer_norm(x + a, g[p + ".ln2.g"], g[p + ".ln2.b"])
        x = layer_norm(x + _ffn(x, s, p + ".ffn"), g[p + ".ln3.g"], g[p + ".ln3.b"])
    return matmul(x, g["out.W"]) + g["out.b"]


def decode_greedy_batch(H_all, enc_mask, s):
    """Greedy decoding for a batch; returns lists of ids (EOS excluded)."""
    c = s.config
    B = H_all.shape[0]
    seqs = np.full((B, 1), D.BOS_ID, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = [[] for _ in range(B)]
    with no_grad():
        for _ in range(c.max_decode_len):
            logits = decoder_logits(seqs, H_all, enc_mask, s).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)  # first maximum = lowest id
            for i in range(B):
                if done[i]:
                    continue
                if nxt[i] == D.EOS_ID:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return out


def decode_greedy(H_all, s, enc_mask=None):
    """Greedy token ids for one fused representation (n x d)."""
    H = H_all if H_all.ndim == 3 else reshape(H_all, (1,) + H_all.shape)
    mask = np.ones(H.shape[:2]) if enc_mask is None else np.asarray(enc_mask).reshape(H.shape[:2])
    return decode_greedy_batch(H, mask, s)[0]


def generate(instances, s, batch_size=64):
    """Greedy explanations (token strings) for each instance, in order."""
    out = []
    with no_grad():
        for k in range(0, len(instances), batch_size):
            chunk = instances[k:k + batch_size]
            b = make_batch(chunk, s, with_targets=False)
            H = fuse_batch(b, s)
            out += [s.vocab.decode(ids) for ids in decode_greedy_batch(H, b.text_mask, s)]
    return out


# ------------------------------------------------------------------ training

class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr, weight_decay):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * p.data
            p.data = p.data - lr * update


def generation_loss(b: Batch, s, mode=None):
    H = fuse_batch(b, s, mode)
    logits = decoder_logits(b.dec_in, H, b.text_mask, s)
    return cross_entropy(logits, b.dec_out, b.dec_mask), logits


def train_step(batch, s, lr, weight_decay):
    """One AdamW step on teacher-forced token cross-entropy; returns the pre-update loss."""
    if not batch:
        raise InputError("empty batch")
    b = batch if isinstance(batch, Batch) else make_batch(batch, s)
    s.zero_grad()
    loss, _ = generation_loss(b, s)
    value = float(loss.data)
    backward(loss)
    if s.optimizer is None:
        s.optimizer = AdamW(s.params)
    s.optimizer.step(lr, weight_decay)
    return value


def token_accuracy(instances, s, batch_size=64):
    """Teacher-forced next-token accuracy over non-pad explanation positions."""
    correct = total = 0
    with no_grad():
        for k in range(0, len(instances), batch_size):
            b = make_batch(instances[k:k + batch_size], s)
            H = fuse_batch(b, s)
            logits = decoder_logits(b.dec_in, H, b.text_mask, s).data
            pred = np.argmax(logits, axis=-1)
            correct += int(((pred == b.dec_out) * b.dec_mask).sum())
            total += int(b.dec_mask.sum())
    return correct / total if total else 0.0


# ------------------------------------------------------------------ affect head

def affect_labels(inst, task):
    if task == "sarcasm":
        return str(inst.sarcasm)
    if task == "humour":
        return str(inst.humour)
    if task == "emotion":
        return inst.emotion
    raise InputError(f"unknown task {task!r}")


def affect_logits(b: Batch, s, task):
    if task not in TASK_CLASSES:
        raise InputError(f"unknown task {task!r}")
    H = encode_text(b.text, s, b.text_mask)
    pooled = masked_mean_rows(H, b.text_mask)
    return matmul(pooled, s[f"affect.{task}.W"]) + s[f"affect.{task}.b"]


def classify_affect(instance, explanation, s, task):
    """(label, logits) for one instance; ``explanation`` tokens are appended after SEP."""
    expl = [explanation] if explanation else None
    with no_grad():
        b = make_batch([instance], s, explanations=expl, with_targets=False)
        logits = affect_logits(b, s, task).data[0]
    return TASK_CLASSES[task][int(np.argmax(logits))], logits


def affect_train_step(instances, explanations, s, task, lr, weight_decay):
    b = make_batch(instances, s, explanations=explanations, with_targets=False)
    classes = TASK_CLASSES[task]
    y = np.array([classes.index(affect_labels(i, task)) for i in instances])
    s.zero_grad()
    logits = affect_logits(b, s, task)
    loss = cross_entropy(logits, y, np.ones(len(instances)))
    value = float(loss.data)
    backward(loss)
    if s.optimizer is None:
        s.optimizer = AdamW(s.params)
    s.optimizer.step(lr, weight_decay)
    return value


def predict_affect(instances, explanations, s, task, batch_size=128):
    classes = TASK_CLASSES[task]
    out, truncated = [], 0
    with no_grad():
        for k in range(0, len(instances), batch_size):
            ex = explanations[k:k + batch_size] if explanations is not None else None
            b = make_batch(instances[k:k + batch_size], s, explanations=ex, with_targets=False)
            truncated += b.truncated
            logits = affect_logits(b, s, task).data
            out += [classes[int(i)] for i in np.argmax(logits, axis=-1)]
    return out, truncated


def build_state(config: ModelConfig, vocab, variants=None):
    return ModelState(config, vocab, variants)


__all__ = [
    "ModelState", "Batch", "make_batch", "encode_text", "encode_modality", "align_modality",
    "fuse_forward", "fuse_batch", "decode_greedy", "decode_greedy_batch", "generate", "train_step",
    "token_accuracy", "classify_affect", "affect_train_step", "predict_affect", "AdamW",
    "expected_parameter_count", "phonetic_index", "InputError", "VocabularyError", "build_state",
]
