"""Synthetic multimodal dialogues, phonetic keys, vocabulary and JSONL I/O.

The generator mirrors the situation where identical text gets a different
verdict depending on tone of voice and facial expression: the sarcasm,
humour and emotion labels and the explanation are all functions of a
(text polarity, tone, face) cell, while the text only carries polarity.
"""
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

PAD, BOS, EOS, SEP, UNK = "<pad>", "<s>", "</s>", "<sep>", "<unk>"
RESERVED = (PAD, BOS, EOS, SEP, UNK)
PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(5)

EMOTIONS = ("neutral", "sadness", "joy", "anger")
SPLITS = ("train", "val", "test")
VOWELS = frozenset("aeiou")

POLARITIES = ("pos", "neg")
TONES = ("flat", "low", "lively")
FACES = ("disgust", "calm", "dancing")

TONE_WORDS = {"flat": "coldly", "low": "softly", "lively": "loudly"}
FACE_WORDS = {"disgust": "frowning", "calm": "blankly", "dancing": "dancing"}
POLAR_WORDS = {"pos": ("fun", "mast", "badhiya", "accha"),
               "neg": ("bekaar", "boring", "ganda", "bura")}
INTENSIFIERS = ("bahut", "kitna", "ekdum")
SPEAKERS = ("maya", "sahil", "monisha", "rosesh", "indravardhan", "madhusudhan", "kismi", "dushyant")

# spelling pairs used in romanised code-mixed text
SEED_VARIANTS = (("main", "mein"), ("kya", "kia"), ("nahi", "nahin"), ("accha", "acha"),
                 ("bahut", "bohot"), ("hai", "hae"))
FUNCTION_WORDS = ("ye", "hai", "main", "kya", "nahi", "to", "na", "yaar")

# published per-split label counts of the WITS-format sarcasm-detection split
WITS_SARCASM_COUNTS = {
    "train": {"S": 1792, "NS": 1669},
    "val": {"S": 224, "NS": 213},
    "test": {"S": 224, "NS": 218},
}
WITS_HUMOUR_COUNTS = {
    "train": {"NH": 2795, "H": 995},
    "val": {"NH": 362, "H": 112},
    "test": {"NH": 367, "H": 106},
}
WITS_EMOTION_COUNTS = {
    "train": {"neutral": 1590, "sadness": 1147, "joy": 623, "anger": 429},
    "val": {"neutral": 196, "sadness": 133, "joy": 87, "anger": 57},
    "test": {"neutral": 195, "sadness": 141, "joy": 70, "anger": 67},
}


class SpecError(ValueError):
    pass


class DataError(ValueError):
    """Malformed record in a JSONL file."""

    def __init__(self, line, field_name, message):
        super().__init__(f"line {line}: field {field_name!r}: {message}")
        self.line = line
        self.field = field_name


@dataclass
class MultimodalInstance:
    context: List[Tuple[str, List[str]]]
    target: Tuple[str, List[str]]
    audio_features: np.ndarray
    video_features: np.ndarray
    explanation: List[str] = field(default_factory=list)
    sarcasm: int = 0
    humour: int = 0
    emotion: str = "neutral"
    split: str = "train"

    def __eq__(self, other):
        if not isinstance(other, MultimodalInstance):
            return NotImplemented
        return (self.context == other.context and self.target == other.target
                and self.explanation == other.explanation
                and (self.sarcasm, self.humour, self.emotion, self.split)
                == (other.sarcasm, other.humour, other.emotion, other.split)
                and _same_array(self.audio_features, other.audio_features)
                and _same_array(self.video_features, other.video_features))


def _same_array(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- phonetics

def collapse_key(token):
    """First character, then remaining consonants, with repeated letters collapsed."""
    t = token.lower()
    if not t:
        return t
    kept = t[0] + "".join(c for c in t[1:] if c not in VOWELS)
    out = [kept[0]]
    for c in kept[1:]:
        if c != out[-1]:
            out.append(c)
    return "".join(out)


class VariantTable:
    """Surface token -> canonical phonetic key."""

    def __init__(self, pairs=()):
        self.mapping: Dict[str, str] = {}
        for group in pairs:
            self.add_group(group)

    def add_group(self, words):
        words = [w.lower() for w in words]
        key = collapse_key(words[0])
        # keys must be fixed points of the lookup so that key(key(x)) == key(x)
        if self.mapping.get(key, key) != key:
            raise SpecError(f"key {key!r} is itself a surface form mapped to {self.mapping[key]!r}")
        taken = set(self.mapping.values())
        for w in words:
            if self.mapping.get(w, key) != key:
                raise SpecError(f"variant {w!r} already mapped to {self.mapping[w]!r}")
            if w != key and w in taken:
                raise SpecError(f"variant {w!r} collides with an existing phonetic key")
        for w in words:
            self.mapping[w] = key

    def __contains__(self, token):
        return token.lower() in self.mapping

    def __len__(self):
        return len(self.mapping)

    def to_dict(self):
        return dict(sorted(self.mapping.items()))

    @classmethod
    def from_dict(cls, d):
        t = cls()
        t.mapping = dict(d)
        return t


def phonetic_key(token, table=None):
    t = token.lower()
    if table is not None and t in table.mapping:
        return table.mapping[t]
    return collapse_key(t)


# ---------------------------------------------------------------- vocabulary

class Vocab:
    def __init__(self, tokens):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out


def instance_tokens(inst):
    for spk, toks in inst.context:
        yield spk
        yield from toks
    yield inst.target[0]
    yield from inst.target[1]
    yield from inst.explanation


def build_vocab(corpus):
    if not corpus:
        raise SpecError("cannot build a vocabulary from an empty corpus")
    words = sorted({t for inst in corpus for t in instance_tokens(inst)} - set(RESERVED))
    return Vocab(words)


# ---------------------------------------------------------------- truth table

def default_truth_table():
    """(polarity, tone, face) -> (sarcasm, humour, emotion, verb)."""
    table = {}
    for pol, tone, face in itertools.product(POLARITIES, TONES, FACES):
        if pol == "pos":
            sarcastic = face == "disgust" or (tone == "flat" and face == "calm")
        else:
            sarcastic = tone == "lively" and face == "dancing"
        humour = (sarcastic and tone == "lively") or (face == "dancing" and pol == "pos" and tone != "low")
        if face == "disgust":
            emotion = "anger"
        elif face == "dancing":
            emotion = "joy"
        elif tone == "low":
            emotion = "sadness"
        else:
            emotion = "neutral"
        verb = "taunts" if sarcastic else "tells"
        table[(pol, tone, face)] = (int(sarcastic), int(humour), emotion, verb)
    return table


@dataclass
class CorpusSpec:
    counts: Dict[str, int] = field(default_factory=lambda: {"train": 2000, "val": 250, "test": 250})
    vocab_size: int = 40
    d_ca: int = 154
    d_cv: int = 2048
    frames: Tuple[int, int] = (3, 6)
    context_turns: Tuple[int, int] = (1, 3)
    noise_scale: float = 0.5
    variant_prob: float = 0.3
    seed: int = 0
    truth_table: Optional[dict] = None

    MAX_VOCAB = 2000

    def validate(self):
        if any(self.counts.get(s, 0) < 0 for s in SPLITS) or sum(self.counts.values()) <= 0:
            raise SpecError(f"instance counts must be non-negative and not all zero: {self.counts}")
        if not 4 <= self.vocab_size <= self.MAX_VOCAB:
            raise SpecError(f"vocab_size {self.vocab_size} outside [4, {self.MAX_VOCAB}]")
        if self.d_ca < 1 or self.d_cv < 1:
            raise SpecError("modality widths must be positive")
        table = self.table()
        missing = [c for c in itertools.product(POLARITIES, TONES, FACES) if c not in table]
        if missing:
            raise SpecError(f"truth table is not total, missing {missing[:3]}")

    def table(self):
        return self.truth_table if self.truth_table is not None else default_truth_table()


def _pseudo_words(rng, count):
    """Distinct pronounceable words whose phonetic keys are also distinct."""
    cons = "bcdghjklmnprstvz"
    vows = "aeiou"
    words, keys = [], set()
    reserved_keys = {collapse_key(w) for w in
                     itertools.chain(FUNCTION_WORDS, INTENSIFIERS, SPEAKERS, *POLAR_WORDS.values(),
                                     TONE_WORDS.values(), FACE_WORDS.values(), ("about", "taunts", "tells"))}
    attempts = 0
    while len(words) < count:
        attempts += 1
        if attempts > 200 * count + 1000:
            raise SpecError(f"cannot draw {count} distinct words")
        syl = rng.integers(2, 4)
        w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(syl))
        if rng.random() < 0.5:
            w += cons[rng.integers(len(cons))]
        k = collapse_key(w)
        if k in keys or k in reserved_keys:
            continue
        keys.add(k)
        words.append(w)
    return words


def _variant(word, rng):
    """Respell by swapping one non-initial vowel; the phonetic key is unchanged."""
    idx = [i for i, c in enumerate(word) if i > 0 and c in VOWELS]
    if not idx:
        return word
    i = idx[rng.integers(len(idx))]
    alts = [v for v in "aeiou" if v != word[i]]
    return word[:i] + alts[rng.integers(len(alts))] + word[i + 1:]


class CorpusGenerator:
    """Deterministic synthetic generator; one spawned stream per instance."""

    def __init__(self, spec: CorpusSpec):
        spec.validate()
        self.spec = spec
        root = np.random.SeedSequence(spec.seed)
        lex_seq, proto_seq, self._inst_seq, self._cell_seq = root.spawn(4)
        lex = np.random.Generator(np.random.Philox(lex_seq))
        n_topic = max(2, spec.vocab_size // 2)
        words = _pseudo_words(lex, spec.vocab_size)
        self.topics = words[:n_topic]
        self.fillers = words[n_topic:] or words[:1]
        # every content word gets one or two alternative spellings
        self.variants: Dict[str, List[str]] = {}
        for w in words:
            alts = []
            for _ in range(int(lex.integers(1, 3))):
                v = _variant(w, lex)
                if v != w and v not in alts and v not in words:
                    alts.append(v)
            if alts:
                self.variants[w] = alts
        for a, b in SEED_VARIANTS:
            self.variants.setdefault(a, []).append(b)
        self.variant_table = VariantTable([a] + alts for a, alts in sorted(self.variants.items()))
        proto = np.random.Generator(np.random.Philox(proto_seq))
        self.tone_proto = {t: proto.standard_normal(spec.d_ca) for t in TONES}
        self.face_proto = {f: proto.standard_normal(spec.d_cv) for f in FACES}

    def _spell(self, word, rng):
        alts = self.variants.get(word)
        if alts and rng.random() < self.spec.variant_prob:
            return alts[int(rng.integers(len(alts)))]
        return word

    def features(self, proto, rng):
        lo, hi = self.spec.frames
        L = int(rng.integers(lo, hi + 1))
        return proto[None, :] + self.spec.noise_scale * rng.standard_normal((L, proto.shape[0]))

    def make_instance(self, polarity, tone, face, rng, split="train", topic=None, speakers=None):
        spec = self.spec
        sarcasm, humour, emotion, verb = spec.table()[(polarity, tone, face)]
        topic = topic if topic is not None else self.topics[int(rng.integers(len(self.topics)))]
        if speakers is None:
            order = rng.permutation(len(SPEAKERS))
            speakers = (SPEAKERS[order[0]], SPEAKERS[order[1]], SPEAKERS[order[2]])
        tgt_spk, addressee, third = speakers
        lo, hi = spec.context_turns
        n_ctx = int(rng.integers(lo, hi + 1))
        context = []
        for j in range(n_ctx):
            # the last context turn is by the addressee
            spk = addressee if j == n_ctx - 1 else (third if j % 2 == 0 else addressee)
            n_words = int(rng.integers(2, 5))
            toks = [self.fillers[int(rng.integers(len(self.fillers)))] for _ in range(n_words)]
            if rng.random() < 0.5:
                toks.insert(int(rng.integers(len(toks) + 1)), topic)
            if rng.random() < 0.5:
                toks.append(FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS)))])
            context.append((spk, [self._spell(t, rng) for t in toks]))
        polar = POLAR_WORDS[polarity][int(rng.integers(len(POLAR_WORDS[polarity])))]
        inten = INTENSIFIERS[int(rng.integers(len(INTENSIFIERS)))]
        target = ["ye", topic, inten, polar, "hai"]
        target = [self._spell(t, rng) for t in target]
        explanation = [tgt_spk, verb, addressee, TONE_WORDS[tone], FACE_WORDS[face], "about", topic]
        return MultimodalInstance(
            context=context,
            target=(tgt_spk, target),
            audio_features=self.features(self.tone_proto[tone], rng),
            video_features=self.features(self.face_proto[face], rng),
            explanation=explanation,
            sarcasm=sarcasm, humour=humour, emotion=emotion, split=split,
        )

    def generate(self):
        out = []
        cells = list(itertools.product(POLARITIES, TONES, FACES))
        total = sum(self.spec.counts.get(s, 0) for s in SPLITS)
        seqs = self._inst_seq.spawn(total)
        cell_rng = np.random.Generator(np.random.Philox(self._cell_seq))
        i = 0
        for split in SPLITS:
            n = self.spec.counts.get(split, 0)
            # balanced schedule: every cell appears floor(n/18) or ceil(n/18) times
            schedule = cell_rng.permutation(np.resize(cell_rng.permutation(len(cells)), n))
            for c in schedule:
                rng = np.random.Generator(np.random.Philox(seqs[i]))
                pol, tone, face = cells[int(c)]
                out.append(self.make_instance(pol, tone, face, rng, split=split))
                i += 1
        return out


def generate_corpus(spec: CorpusSpec):
    return CorpusGenerator(spec).generate()


def implied_marginals(spec: CorpusSpec):
    """Label proportions implied by a uniform draw over truth-table cells."""
    table = spec.table()
    n = len(table)
    emo = {e: 0 for e in EMOTIONS}
    for s, h, e, _ in table.values():
        emo[e] += 1
    return {
        "sarcasm": sum(v[0] for v in table.values()) / n,
        "humour": sum(v[1] for v in table.values()) / n,
        "emotion": {e: c / n for e, c in emo.items()},
    }


# ---------------------------------------------------------------- JSONL

def _fmt_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise DataError(0, "features", "non-finite value")
    return "[" + ",".join("[" + ",".join(format(x, ".17g") for x in row) + "]" for row in m) + "]"


def instance_to_json(inst):
    head = {
        "speakers": [s for s, _ in inst.context],
        "utterances": [" ".join(t) for _, t in inst.context],
        "target_speaker": inst.target[0],
        "target": " ".join(inst.target[1]),
    }
    tail = {
        "explanation": " ".join(inst.explanation),
        "sarcasm": int(inst.sarcasm),
        "humour": int(inst.humour),
        "emotion": inst.emotion,
        "split": inst.split,
    }
    h = json.dumps(head, ensure_ascii=False)[:-1]
    t = json.dumps(tail, ensure_ascii=False)[1:]
    return (f'{h}, "audio": {_fmt_matrix(inst.audio_features)}, '
            f'"video": {_fmt_matrix(inst.video_features)}, {t}')


def write_jsonl(instances, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(instance_to_json(inst))
            fh.write("\n")


def _matrix(obj, line, name):
    try:
        arr = np.array(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(line, name, "not a numeric matrix") from None
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DataError(line, name, f"expected a non-empty 2-D matrix, got shape {arr.shape}")
    return arr


def instance_from_json(rec, line=0):
    required = ("speakers", "utterances", "target_speaker", "target", "audio", "video",
                "explanation", "sarcasm", "humour", "emotion", "split")
    for name in required:
        if name not in rec:
            raise DataError(line, name, "missing")
    if len(rec["speakers"]) != len(rec["utterances"]):
        raise DataError(line, "utterances", "length differs from speakers")
    target = rec["target"].split()
    if not target:
        raise DataError(line, "target", "empty target utterance")
    if rec["emotion"] not in EMOTIONS:
        raise DataError(line, "emotion", f"unknown label {rec['emotion']!r}")
    if rec["split"] not in SPLITS:
        raise DataError(line, "split", f"unknown split {rec['split']!r}")
    for name in ("sarcasm", "humour"):
        if rec[name] not in (0, 1):
            raise DataError(line, name, "expected 0 or 1")
    return MultimodalInstance(
        context=[(s, u.split()) for s, u in zip(rec["speakers"], rec["utterances"])],
        target=(rec["target_speaker"], target),
        audio_features=_matrix(rec["audio"], line, "audio"),
        video_features=_matrix(rec["video"], line, "video"),
        explanation=rec["explanation"].split(),
        sarcasm=int(rec["sarcasm"]), humour=int(rec["humour"]),
        emotion=rec["emotion"], split=rec["split"],
    )


def load_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(lineno, "<json>", str(exc)) from None
            if not isinstance(rec, dict):
                raise DataError(lineno, "<json>", "record is not an object")
            out.append(instance_from_json(rec, lineno))
    return out


# ---------------------------------------------------------------- detection splits

@dataclass
class DetectionCorpus:
    instances: List[MultimodalInstance]
    skipped: int = 0
    n_positive: int = 0
    n_negative: int = 0


def assign_splits(n, rng, ratios=(0.8, 0.1, 0.1)):
    """Split labels for ``n`` items in shuffled order, sizes by rounding."""
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n)
    out = [None] * n
    for pos, idx in enumerate(order):
        out[idx] = labels[pos]
    return out


def build_detection_splits(sed_corpus, ratio=1.0, seed=0, split_ratios=(0.8, 0.1, 0.1)):
    """Sarcastic originals plus negatives whose target is a sampled context turn."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    positives = [replace(inst, sarcasm=1) for inst in sed_corpus if inst.sarcasm == 1]
    n_neg = int(round(ratio * len(positives)))
    negatives, skipped = [], 0
    for i in range(n_neg):
        src = positives[i % len(positives)] if positives else None
        if src is None:
            break
        if not src.context:
            skipped += 1
            continue
        j = int(rng.integers(len(src.context)))
        negatives.append(replace(src, context=list(src.context[:j]), target=src.context[j],
                                 explanation=[], sarcasm=0))
    allinst = positives + negatives
    labels = assign_splits(len(allinst), rng, split_ratios)
    allinst = [replace(inst, split=lab) for inst, lab in zip(allinst, labels)]
    return DetectionCorpus(allinst, skipped, len(positives), len(negatives))


# ---------------------------------------------------------------- stats

def observed_counts(corpus):
    counts = {s: {} for s in SPLITS}
    for inst in corpus:
        c = counts.setdefault(inst.split, {})
        for key in ("S" if inst.sarcasm else "NS", "H" if inst.humour else "NH", inst.emotion):
            c[key] = c.get(key, 0) + 1
    return counts


@dataclass
class StatsReport:
    observed: Dict[str, Dict[str, int]]
    deltas: List[Tuple[str, str, int, int, int]]

    @property
    def passed(self):
        return not self.deltas

    def to_dict(self):
        return {"passed": self.passed, "observed": self.observed,
                "deltas": [dict(split=s, label=l, expected=e, observed=o, delta=d)
                           for s, l, e, o, d in self.deltas]}


def validate_stats(corpus, expected):
    """Compare per-split label counts with ``expected`` ({split: {label: count}})."""
    obs = observed_counts(corpus)
    deltas = []
    for split, labels in expected.items():
        for label, exp in labels.items():
            got = obs.get(split, {}).get(label, 0)
            if got != exp:
                deltas.append((split, label, exp, got, got - exp))
    return StatsReport(obs, deltas)


def fixture_from_counts(counts, d_ca=2, d_cv=2):
    """Minimal labelled instances realising ``counts`` for sarcasm labels S/NS."""
    out = []
    for split, labels in counts.items():
        for label, n in labels.items():
            for _ in range(n):
                out.append(MultimodalInstance(
                    context=[("a", ["x"])], target=("b", ["y"]),
                    audio_features=np.zeros((1, d_ca)), video_features=np.zeros((1, d_cv)),
                    explanation=["e"] if label == "S" else [],
                    sarcasm=int(label == "S"), split=split))
    return out


def frame_bound_fraction(corpus, generator):
    """Fraction of feature entries within prototype +/- 3 noise scales (per modality)."""
    # inverse lookup of prototypes is not stored per instance; use nearest prototype
    k = 3 * generator.spec.noise_scale
    inside = total = 0
    for inst in corpus:
        for feats, protos in ((inst.audio_features, generator.tone_proto),
                              (inst.video_features, generator.face_proto)):
            mean = feats.mean(axis=0)
            proto = min(protos.values(), key=lambda p: float(np.sum((p - mean) ** 2)))
            dev = np.abs(feats - proto[None, :])
            inside += int((dev <= k).sum())
            total += dev.size
    return inside / total if total else math.nan
