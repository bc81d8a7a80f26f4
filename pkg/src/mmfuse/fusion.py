"""Gated information fusion and the modality spotlight.

Each modality takes the primary role in turn; context-fused streams are
merged into their primary with affine gates, and a final set of eight gates
(text stream as the shared reference) collapses everything into one stream.
"""
from dataclasses import dataclass
from typing import Dict, Optional

from .attention import dpa_attend, mca2_attend
from .tensor import DimensionError, Tensor, concat, matmul, mul, sigmoid

BUNDLE_KEYS = ("H", "H_Ta", "H_tA", "H_Tv", "H_tV", "H_Tav", "H_tAv", "H_taV")

# context-attention blocks, keyed "primary|context"
ATTENTION_PAIRS = ("t|a", "a|t", "t|v", "v|t", "a|v", "v|a")

# per-stream gates inside the spotlight: bimodal fuses then trimodal (two each)
SPOTLIGHT_GATES = ("Ta", "tA", "Tv", "tV",
                   "Tav.a", "Tav.v", "tAv.t", "tAv.v", "taV.t", "taV.a")

GLOBAL_GATES = ("t", "Ta", "tA", "Tv", "tV", "Tav", "tAv", "taV")


@dataclass
class GifParams:
    W_gate: Tensor
    b_gate: Tensor

    def __post_init__(self):
        d = self.b_gate.shape[-1]
        if self.W_gate.shape != (2 * d, d) or self.b_gate.shape != (d,):
            raise DimensionError(
                f"GIF params need W (2d x d) and b (d,), got {self.W_gate.shape}, {self.b_gate.shape}")


@dataclass
class SpotlightBundle:
    H: Tensor
    H_Ta: Optional[Tensor] = None
    H_tA: Optional[Tensor] = None
    H_Tv: Optional[Tensor] = None
    H_tV: Optional[Tensor] = None
    H_Tav: Optional[Tensor] = None
    H_tAv: Optional[Tensor] = None
    H_taV: Optional[Tensor] = None

    def members(self):
        """Present members in canonical order as (key, tensor) pairs."""
        out = []
        for key in BUNDLE_KEYS:
            t = getattr(self, key)
            if t is not None:
                if t.shape != self.H.shape:
                    raise DimensionError(f"bundle member {key} has shape {t.shape}, H is {self.H.shape}")
                out.append((key, t))
        return out


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def gif_gate(H_ref, H_x, p, gate_sigmoid=False):
    _same_shape(H_ref, H_x, "gif_gate")
    g = matmul(concat([H_ref, H_x], axis=-1), p.W_gate) + p.b_gate
    return sigmoid(g) if gate_sigmoid else g


def gif_fuse_bimodal(H, H_x, p, gate_sigmoid=False):
    return H + mul(gif_gate(H, H_x, p, gate_sigmoid), H_x)


def gif_fuse_trimodal(H, H_c1, H_c2, p1, p2, gate_sigmoid=False):
    g1 = gif_gate(H, H_c1, p1, gate_sigmoid)
    g2 = gif_gate(H, H_c2, p2, gate_sigmoid)
    return H + mul(g1, H_c1) + mul(g2, H_c2)


def context_streams(streams, attn, pairs, attention="mca2", key_mask=None):
    """C(P|X) for each requested "P|X" pair."""
    attend = mca2_attend if attention == "mca2" else dpa_attend
    out = {}
    for pair in pairs:
        primary, context = pair.split("|")
        if streams[primary].shape != streams[context].shape:
            raise DimensionError(
                f"spotlight streams misaligned: {primary} {streams[primary].shape}, "
                f"{context} {streams[context].shape}")
        out[pair] = attend(streams[primary], streams[context], attn[pair], key_mask=key_mask).fused
    return out


def spotlight(H_t, H_a, H_v, attn: Dict[str, object], gif: Dict[str, GifParams],
              gate_sigmoid=False, attention="mca2", key_mask=None, modalities="tav"):
    """Fused streams with each modality as primary in turn.

    ``modalities`` restricts the computation to "ta" or "tv" sub-graphs; no
    audio/video bimodal pair is ever produced.
    """
    streams = {"t": H_t, "a": H_a, "v": H_v}
    for name in ("a", "v"):
        if name in modalities and H_t.shape != streams[name].shape:
            raise DimensionError(f"stream {name} shape {streams[name].shape} vs text {H_t.shape}")
    if modalities == "ta":
        pairs = ("t|a", "a|t")
    elif modalities == "tv":
        pairs = ("t|v", "v|t")
    else:
        pairs = ATTENTION_PAIRS
    C = context_streams(streams, attn, pairs, attention, key_mask)
    fuse2 = lambda h, c, k: gif_fuse_bimodal(h, c, gif[k], gate_sigmoid)
    b = SpotlightBundle(H=H_t)
    if "a" in modalities:
        b.H_Ta = fuse2(H_t, C["t|a"], "Ta")
        b.H_tA = fuse2(H_a, C["a|t"], "tA")
    if "v" in modalities:
        b.H_Tv = fuse2(H_t, C["t|v"], "Tv")
        b.H_tV = fuse2(H_v, C["v|t"], "tV")
    if modalities == "tav":
        b.H_Tav = gif_fuse_trimodal(H_t, C["t|a"], C["t|v"], gif["Tav.a"], gif["Tav.v"], gate_sigmoid)
        b.H_tAv = gif_fuse_trimodal(H_a, C["a|t"], C["a|v"], gif["tAv.t"], gif["tAv.v"], gate_sigmoid)
        b.H_taV = gif_fuse_trimodal(H_v, C["v|t"], C["v|a"], gif["taV.t"], gif["taV.a"], gate_sigmoid)
    return b


def global_fuse(b: SpotlightBundle, p: Dict[str, GifParams], gate_sigmoid=False):
    """Sum of gated bundle members; there is no ungated residual term."""
    out = None
    for key, member in b.members():
        gate_key = "t" if key == "H" else key[2:]
        term = mul(gif_gate(b.H, member, p[gate_key], gate_sigmoid), member)
        out = term if out is None else out + term
    return out
