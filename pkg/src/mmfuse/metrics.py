"""Generation metrics and classification reports.

Definitions are fixed here rather than delegated to a toolkit:

* ROUGE-N: clipped n-gram overlap, F1 with beta = 1; ROUGE-L via LCS.
* BLEU: corpus level, clipped modified precision, single brevity penalty over
  summed lengths, no smoothing (a zero precision at any used order zeroes B_k).
* METEOR: exact surface matches only. The alignment maximises matches, then
  minimises chunks. F_mean = 10PR / (R + 9P), penalty = 0.5 (chunks/matches)^3,
  except a candidate identical to its reference (all tokens matched in one
  chunk) has no fragmentation penalty.

Corpus ROUGE and METEOR are means of sentence scores.
"""
import functools
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence

import numpy as np

from .kernels import lcs_length


def tokenize(text):
    """Whitespace tokens of lowercased text."""
    return text.lower().split()


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _prf(overlap, n_cand, n_ref):
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def rouge_n(candidate, reference, n=1):
    if n < 1:
        raise ValueError("n must be >= 1")
    c, r = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((c & r).values())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def _ids(a, b):
    vocab = {}
    to = lambda seq: np.array([vocab.setdefault(t, len(vocab)) for t in seq], dtype=np.int64)
    return to(a), to(b)


def rouge_l(candidate, reference):
    a, b = _ids(candidate, reference)
    ell = lcs_length(a, b)
    return _prf(ell, len(candidate), len(reference))


def _brevity_penalty(c, r):
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu(corpus, max_n=4):
    """Corpus BLEU-1..max_n. ``corpus`` is a list of (candidate, [references])."""
    if not corpus:
        raise ValueError("empty corpus")
    matched = [0] * (max_n + 1)
    total = [0] * (max_n + 1)
    c_len = r_len = 0
    for cand, refs in corpus:
        if refs and isinstance(refs[0], str):
            refs = [refs]
        c_len += len(cand)
        # closest reference length, ties to the shorter
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            cg = ngrams(cand, n)
            max_ref = Counter()
            for ref in refs:
                max_ref |= ngrams(ref, n)
            matched[n] += sum(min(cnt, max_ref[g]) for g, cnt in cg.items())
            total[n] += sum(cg.values())
    bp = _brevity_penalty(c_len, r_len)
    out = []
    log_sum = 0.0
    dead = False
    for n in range(1, max_n + 1):
        if total[n] == 0 or matched[n] == 0:
            dead = True
        else:
            log_sum += math.log(matched[n] / total[n])
        out.append(0.0 if dead else bp * math.exp(log_sum / n))
    return out


def modified_precision(candidate, references, n):
    """(clipped matches, candidate n-gram count) for one sentence."""
    cg = ngrams(candidate, n)
    max_ref = Counter()
    for ref in references:
        max_ref |= ngrams(ref, n)
    return sum(min(c, max_ref[g]) for g, c in cg.items()), sum(cg.values())


def meteor_alignment(candidate, reference):
    """(matches, chunks) of the max-match, min-chunk exact alignment."""
    need = {w: min(c, reference.count(w)) for w, c in Counter(candidate).items()}
    matches = sum(need.values())
    if matches == 0:
        return 0, 0
    ref_pos = defaultdict(list)
    for j, w in enumerate(reference):
        if need.get(w):
            ref_pos[w].append(j)
    n = len(candidate)
    # occurrences of each word in candidate[i:]
    suffix = [None] * (n + 1)
    acc = Counter()
    suffix[n] = Counter()
    for i in range(n - 1, -1, -1):
        acc = acc.copy()
        acc[candidate[i]] += 1
        suffix[i] = acc

    @functools.lru_cache(maxsize=None)
    def best(i, prev_j, used):
        # max number of adjacent aligned pairs from position i on
        if i == n:
            return 0
        w = candidate[i]
        if not need.get(w):
            return best(i + 1, -2, used)
        used_w = sum(1 for j in ref_pos[w] if used >> j & 1)
        left = need[w] - used_w
        result = -1
        if suffix[i + 1][w] >= left:
            result = best(i + 1, -2, used)
        if left > 0:
            for j in ref_pos[w]:
                if used >> j & 1:
                    continue
                sub = best(i + 1, j, used | (1 << j))
                if sub < 0:
                    continue
                gain = 1 if j == prev_j + 1 and prev_j >= 0 else 0
                result = max(result, sub + gain)
        return result

    links = best(0, -2, 0)
    best.cache_clear()
    return matches, matches - links


def meteor_exact(candidate, reference):
    matches, chunks = meteor_alignment(candidate, reference)
    if matches == 0:
        return 0.0
    p = matches / len(candidate)
    r = matches / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    if chunks == 1 and matches == len(candidate) == len(reference):
        penalty = 0.0
    else:
        penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


@dataclass
class ScoreTable:
    r1: float
    r2: float
    rl: float
    b1: float
    b2: float
    b3: float
    b4: float
    meteor: float
    n: int

    COLUMNS = ("r1", "r2", "rl", "b1", "b2", "b3", "b4", "meteor")

    def scaled(self):
        """Values x100 rounded to two decimals."""
        return {k: round(100 * getattr(self, k), 2) for k in self.COLUMNS}

    def to_dict(self):
        d = asdict(self)
        d["scaled"] = self.scaled()
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def score_corpus(candidates, references):
    """ScoreTable over parallel lists of token sequences."""
    if len(candidates) != len(references) or not candidates:
        raise ValueError("candidates and references must be non-empty and parallel")
    n = len(candidates)
    r1 = sum(rouge_n(c, r, 1)[2] for c, r in zip(candidates, references)) / n
    r2 = sum(rouge_n(c, r, 2)[2] for c, r in zip(candidates, references)) / n
    rl = sum(rouge_l(c, r)[2] for c, r in zip(candidates, references)) / n
    b = bleu([(c, [r]) for c, r in zip(candidates, references)])
    m = sum(meteor_exact(c, r) for c, r in zip(candidates, references)) / n
    return ScoreTable(r1, r2, rl, b[0], b[1], b[2], b[3], m, n)


def format_table(rows: Dict[str, ScoreTable]):
    """Aligned-column text table, one row per named ScoreTable, values x100."""
    cols = ScoreTable.COLUMNS
    name_w = max([len("model")] + [len(k) for k in rows])
    header = "model".ljust(name_w) + "".join(c.upper().rjust(9) for c in cols)
    lines = [header, "-" * len(header)]
    for name, t in rows.items():
        s = t.scaled()
        lines.append(name.ljust(name_w) + "".join(f"{s[c]:9.2f}" for c in cols))
    return "\n".join(lines)


@dataclass
class ClassReport:
    classes: List[str]
    precision: List[float]
    recall: List[float]
    f1: List[float]
    support: List[int]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    confusion: List[List[int]]

    def to_dict(self):
        return asdict(self)

    def format(self):
        w = max(len(c) for c in self.classes + ["weighted"])
        lines = ["class".ljust(w) + "        P        R       F1  support"]
        for i, c in enumerate(self.classes):
            lines.append(f"{c.ljust(w)} {self.precision[i]:8.4f} {self.recall[i]:8.4f} "
                         f"{self.f1[i]:8.4f} {self.support[i]:8d}")
        lines.append(f"{'weighted'.ljust(w)} {self.weighted_precision:8.4f} "
                     f"{self.weighted_recall:8.4f} {self.weighted_f1:8.4f} {sum(self.support):8d}")
        lines.append(f"accuracy {self.accuracy:.4f}")
        lines.append("confusion (rows gold, cols pred):")
        for c, row in zip(self.classes, self.confusion):
            lines.append(c.ljust(w) + "".join(f"{v:7d}" for v in row))
        return "\n".join(lines)


def classification_report(gold: Sequence, pred: Sequence, classes: Sequence):
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} labels, pred has {len(pred)}")
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    conf = [[0] * k for _ in range(k)]
    for g, p in zip(gold, pred):
        if g not in index or p not in index:
            bad = g if g not in index else p
            raise ValueError(f"label {bad!r} not in class set {classes}")
        conf[index[g]][index[p]] += 1
    support = [sum(row) for row in conf]
    predicted = [sum(conf[i][j] for i in range(k)) for j in range(k)]
    prec, rec, f1 = [], [], []
    for i in range(k):
        tp = conf[i][i]
        p = tp / predicted[i] if predicted[i] else 0.0
        r = tp / support[i] if support[i] else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    n = len(gold)
    wavg = lambda xs: sum(x * s for x, s in zip(xs, support)) / n if n else 0.0
    acc = sum(conf[i][i] for i in range(k)) / n if n else 0.0
    return ClassReport([str(c) for c in classes], prec, rec, f1, support,
                       wavg(prec), wavg(rec), wavg(f1), acc, conf)
