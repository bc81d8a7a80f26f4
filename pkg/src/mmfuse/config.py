"""Model and run configuration, presets, and strict key checking."""
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Tuple

MODES = ("T", "TA", "TV", "TAV", "concat", "DPA")
ATTENTIONS = ("mca2", "dpa")
COMBINES = ("spotlight", "gif", "sum")
TASK_CLASSES = {
    "sarcasm": ("0", "1"),
    "humour": ("0", "1"),
    "emotion": ("neutral", "sadness", "joy", "anger"),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamConfig:
    layers: int
    heads: int
    d_c: int


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d: int = 64
    n_max: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads_text: int = 2
    ffn_mult: int = 2
    audio: StreamConfig = StreamConfig(4, 2, 154)
    video: StreamConfig = StreamConfig(4, 8, 2048)
    pe: StreamConfig = StreamConfig(4, 2, 154)
    pe_vocab_size: int = 64
    fusion_insert: Optional[Tuple[int, ...]] = None
    gate_sigmoid: bool = False
    max_decode_len: int = 16
    seed: int = 0
    mode: str = "TAV"
    attention: str = "mca2"
    combine: str = "spotlight"
    use_pe: bool = True

    def __post_init__(self):
        if self.fusion_insert is None:
            object.__setattr__(self, "fusion_insert", (self.encoder_layers - 1,))
        else:
            object.__setattr__(self, "fusion_insert", tuple(sorted(set(int(i) for i in self.fusion_insert))))
        self.validate()

    def validate(self):
        for name in ("vocab_size", "d", "n_max", "encoder_layers", "decoder_layers", "heads_text",
                     "ffn_mult", "pe_vocab_size", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("audio", "video", "pe"):
            sc = getattr(self, name)
            if min(sc.layers, sc.heads, sc.d_c) < 1:
                raise ConfigError(f"{name}: all extents must be positive, got {sc}")
            if sc.d_c % sc.heads:
                raise ConfigError(f"{name}: d_c {sc.d_c} not divisible by {sc.heads} heads")
        if self.d % self.heads_text:
            raise ConfigError(f"d {self.d} not divisible by heads_text {self.heads_text}")
        if not all(0 <= i < self.encoder_layers for i in self.fusion_insert):
            raise ConfigError(f"fusion_insert {self.fusion_insert} outside [0, {self.encoder_layers})")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.attention not in ATTENTIONS:
            raise ConfigError(f"unknown attention {self.attention!r}")
        if self.combine not in COMBINES:
            raise ConfigError(f"unknown combine {self.combine!r}")

    @property
    def uses_audio(self):
        return self.mode in ("TA", "TAV", "concat", "DPA")

    @property
    def uses_video(self):
        return self.mode in ("TV", "TAV", "concat", "DPA")

    @property
    def fusion_attention(self):
        return "dpa" if self.mode == "DPA" else self.attention

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        for name in ("audio", "video", "pe"):
            if name in d and not isinstance(d[name], StreamConfig):
                sub = dict(d[name])
                bad = set(sub) - {"layers", "heads", "d_c"}
                if bad:
                    raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
                default = cls.__dataclass_fields__[name].default
                d[name] = StreamConfig(**{**asdict(default), **sub})
        if d.get("fusion_insert") is not None:
            d["fusion_insert"] = tuple(d["fusion_insert"])
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


# full-width stream encoders; optimiser settings sit in the matching TrainConfig preset
FULL_SCALE_MODEL = dict(audio=StreamConfig(4, 2, 154), video=StreamConfig(4, 8, 2048), pe=StreamConfig(4, 2, 154))
TOY_MODEL = dict(d=64, encoder_layers=2, decoder_layers=2, heads_text=2,
                 audio=StreamConfig(2, 2, 16), video=StreamConfig(2, 8, 32), pe=StreamConfig(2, 2, 16))

# narrow single-layer model used for the multi-seed trend experiments
TREND_MODEL = dict(d=32, encoder_layers=1, decoder_layers=1, heads_text=2, n_max=48,
                   audio=StreamConfig(1, 2, 16), video=StreamConfig(1, 2, 16), pe=StreamConfig(1, 2, 16))


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 1
    seed: int = 0
    eval_batch_size: int = 64


PRESETS = {
    "toy": {"model": TOY_MODEL, "train": dict(batch_size=4, lr=1e-3, weight_decay=1e-4),
            "corpus": dict(d_ca=16, d_cv=32)},
    "paper-defaults": {"model": FULL_SCALE_MODEL, "train": dict(batch_size=4, lr=5e-6, weight_decay=1e-4),
                       "corpus": dict(d_ca=154, d_cv=2048)},
}


def load_json_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
