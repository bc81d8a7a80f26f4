"""Training loop, evaluation, and the multi-run experiment protocols."""
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from .config import TASK_CLASSES, ModelConfig, StreamConfig, TrainConfig
from .metrics import ClassReport, ScoreTable, classification_report, format_table, score_corpus
from .model import (ModelState, affect_labels, affect_train_step, generate, make_batch, phonetic_index,
                    predict_affect, token_accuracy, train_step)

log = logging.getLogger("mmfuse")

# Ladder rows as overrides on the base model config; each row adds one component.
LADDER = (
    ("text-only", dict(mode="T", use_pe=False)),
    ("+concat", dict(mode="concat", use_pe=False)),
    ("+DPA", dict(mode="DPA", combine="sum", use_pe=False)),
    ("+MCA2", dict(mode="TAV", attention="mca2", combine="sum", use_pe=False)),
    ("+GIF", dict(mode="TAV", attention="mca2", combine="gif", use_pe=False)),
    ("+PE", dict(mode="TAV", attention="mca2", combine="gif", use_pe=True)),
    ("+MS", dict(mode="TAV", attention="mca2", combine="spotlight", use_pe=True)),
)

REGIMES = ("A", "B", "C")


def split(corpus, name):
    return [i for i in corpus if i.split == name]


def model_config_for(corpus, vocab, variants, overrides=None, seed=0):
    """A ModelConfig whose data-dependent extents (vocabulary, feature widths) match ``corpus``."""
    kw = dict(overrides or {})
    _, n_keys = phonetic_index(vocab, variants)
    inst = corpus[0]
    for name, width in (("audio", inst.audio_features.shape[1]), ("video", inst.video_features.shape[1])):
        sc = kw.get(name, ModelConfig.__dataclass_fields__[name].default)
        if isinstance(sc, dict):
            sc = StreamConfig(**sc)
        kw[name] = StreamConfig(sc.layers, sc.heads, width)
    kw.update(vocab_size=len(vocab), pe_vocab_size=max(n_keys, 1), seed=seed)
    return ModelConfig.from_dict(kw)


def _epoch_order(n, seed, epoch):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


def train_model(s: ModelState, instances, tc: TrainConfig, log_lines=None):
    """Shuffled mini-batch training; loss lines (deterministic text) go to ``log_lines``."""
    log_lines = [] if log_lines is None else log_lines
    step = 0
    for epoch in range(tc.epochs):
        order = _epoch_order(len(instances), tc.seed, epoch)
        for k in range(0, len(order), tc.batch_size):
            batch = [instances[i] for i in order[k:k + tc.batch_size]]
            loss = train_step(batch, s, tc.lr, tc.weight_decay)
            log_lines.append(f"epoch={epoch} step={step} loss={loss:.12e}")
            step += 1
        log.info("epoch %d done, last loss %.4f", epoch, loss)
    return log_lines


def evaluate(s: ModelState, instances, batch_size=64):
    """(ScoreTable, generated token lists) against the gold explanations."""
    preds = generate(instances, s, batch_size)
    return score_corpus(preds, [i.explanation for i in instances]), preds


def _summary(values):
    return {"mean": float(np.mean(values)), "median": float(statistics.median(values)), "runs": list(values)}


class RunCache:
    """Trained states keyed by (model config, train config) so protocols can share runs."""

    def __init__(self):
        self.states: Dict[str, ModelState] = {}

    @staticmethod
    def key(cfg: ModelConfig, tc: TrainConfig):
        return json.dumps([cfg.to_dict(), asdict(tc)], sort_keys=True)

    def train(self, cfg, vocab, variants, train_set, tc):
        k = self.key(cfg, tc)
        if k not in self.states:
            s = ModelState(cfg, vocab, variants)
            train_model(s, train_set, tc)
            self.states[k] = s
        return self.states[k]


# ------------------------------------------------------------------ mode trend

@dataclass
class TrendResult:
    accuracy: Dict[str, List[float]]
    states: Dict[tuple, ModelState] = field(default_factory=dict, repr=False)

    def median(self, mode):
        return statistics.median(self.accuracy[mode])

    def to_dict(self):
        return {m: _summary(v) for m, v in self.accuracy.items()}


def run_mode_trend(corpus, variants, modes=("T", "TA", "TAV"), seeds=(0, 1, 2), overrides=None,
                   tc: Optional[TrainConfig] = None, eval_split="test", cache: Optional[RunCache] = None):
    """Teacher-forced eval token accuracy per mode and seed."""
    tc = tc or TrainConfig()
    cache = cache or RunCache()
    vocab = D.build_vocab(corpus)
    train_set, eval_set = split(corpus, "train"), split(corpus, eval_split)
    out = TrendResult({m: [] for m in modes})
    for mode in modes:
        for seed in seeds:
            cfg = model_config_for(corpus, vocab, variants, {**(overrides or {}), "mode": mode}, seed)
            s = cache.train(cfg, vocab, variants, train_set, TrainConfig(**{**asdict(tc), "seed": seed}))
            acc = token_accuracy(eval_set, s, tc.eval_batch_size)
            log.info("trend mode=%s seed=%d acc=%.4f", mode, seed, acc)
            out.accuracy[mode].append(acc)
            out.states[(mode, seed)] = s
    return out


# ------------------------------------------------------------------ ablation ladder

@dataclass
class AblationRow:
    name: str
    runs: List[ScoreTable]

    def aggregate(self, how):
        f = statistics.median if how == "median" else statistics.fmean
        vals = {c: f([getattr(t, c) for t in self.runs]) for c in ScoreTable.COLUMNS}
        return ScoreTable(**vals, n=self.runs[0].n)


@dataclass
class AblationReport:
    rows: List[AblationRow]

    def names(self):
        return [r.name for r in self.rows]

    def row(self, name):
        return next(r for r in self.rows if r.name == name)

    def format(self):
        parts = []
        for how in ("median", "mean"):
            parts.append(f"[{how} over {len(self.rows[0].runs)} runs]")
            parts.append(format_table({r.name: r.aggregate(how) for r in self.rows}))
        return "\n".join(parts)

    def to_dict(self):
        return {"rows": [{"name": r.name, "runs": [t.scaled() for t in r.runs],
                          "median": r.aggregate("median").scaled(), "mean": r.aggregate("mean").scaled()}
                         for r in self.rows]}


def run_ablation_suite(corpus, variants, base_overrides=None, tc: Optional[TrainConfig] = None,
                       seeds=(0, 1, 2), cache: Optional[RunCache] = None, eval_split="test"):
    """Seven ladder rows, each trained and scored with the same seeds and budget."""
    tc = tc or TrainConfig()
    cache = cache or RunCache()
    vocab = D.build_vocab(corpus)
    train_set, eval_set = split(corpus, "train"), split(corpus, eval_split)
    rows = []
    for name, over in LADDER:
        runs = []
        for seed in seeds:
            cfg = model_config_for(corpus, vocab, variants, {**(base_overrides or {}), **over}, seed)
            s = cache.train(cfg, vocab, variants, train_set, TrainConfig(**{**asdict(tc), "seed": seed}))
            table, _ = evaluate(s, eval_set, tc.eval_batch_size)
            log.info("ablation %s seed=%d R1=%.2f", name, seed, 100 * table.r1)
            runs.append(table)
        rows.append(AblationRow(name, runs))
    return AblationReport(rows)


# ------------------------------------------------------------------ affect protocol

@dataclass
class AffectResult:
    task: str
    reports: Dict[str, ClassReport]
    truncated: Dict[str, int]

    def to_dict(self):
        return {"task": self.task, "truncated": self.truncated,
                "reports": {k: v.to_dict() for k, v in self.reports.items()}}

    def format(self):
        return "\n\n".join(f"regime {k}\n{v.format()}" for k, v in self.reports.items())


def train_classifier(train_set, explanations, vocab, variants, task, overrides=None, tc=None, seed=0,
                     corpus=None):
    """Text-only encoder + affect head, optionally reading appended explanations."""
    tc = tc or TrainConfig()
    over = {**(overrides or {}), "mode": "T", "use_pe": False}
    cfg = model_config_for(corpus or train_set, vocab, variants, over, seed)
    s = ModelState(cfg, vocab, variants)
    for epoch in range(tc.epochs):
        order = _epoch_order(len(train_set), seed, epoch)
        for k in range(0, len(order), tc.batch_size):
            idx = order[k:k + tc.batch_size]
            ex = [explanations[i] for i in idx] if explanations is not None else None
            affect_train_step([train_set[i] for i in idx], ex, s, task, tc.lr, tc.weight_decay)
    return s


def run_affect_eval(corpus, explainer: ModelState, task="sarcasm", overrides=None, tc=None, seed=0,
                    eval_split="test"):
    """Regime A: no explanations. B: generated explanations appended at training only.
    C: appended at training and at test time."""
    if task not in TASK_CLASSES:
        raise ValueError(f"unknown task {task!r}")
    tc = tc or TrainConfig()
    vocab = explainer.vocab
    variants = explainer.variants
    train_set, test_set = split(corpus, "train"), split(corpus, eval_split)
    gen_train = generate(train_set, explainer, tc.eval_batch_size)
    gen_test = generate(test_set, explainer, tc.eval_batch_size)
    gold = [affect_labels(i, task) for i in test_set]
    classes = TASK_CLASSES[task]
    plain = train_classifier(train_set, None, vocab, variants, task, overrides, tc, seed, corpus)
    informed = train_classifier(train_set, gen_train, vocab, variants, task, overrides, tc, seed, corpus)
    reports, truncated = {}, {}
    for regime, (s, ex) in {"A": (plain, None), "B": (informed, None), "C": (informed, gen_test)}.items():
        pred, trunc = predict_affect(test_set, ex, s, task)
        reports[regime] = classification_report(gold, pred, classes)
        truncated[regime] = trunc
        log.info("affect %s regime %s weighted F1 %.4f", task, regime, reports[regime].weighted_f1)
    return AffectResult(task, reports, truncated)
