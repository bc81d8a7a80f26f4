"""Command-line entry point: ``mmfuse <command> [options]``."""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from . import data as D
from .checkpoint import CorruptCheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, MODES, ModelConfig, TASK_CLASSES, TrainConfig, load_json_config
from .experiments import (model_config_for, run_ablation_suite, run_affect_eval, split, train_model,
                          evaluate)
from .metrics import format_table, score_corpus
from .model import ModelState, generate

log = logging.getLogger("mmfuse")

COMMANDS = ("gen-data", "train", "evaluate", "explain", "ablate", "affect-eval", "validate-stats")
CORPUS_KEYS = {f.name for f in fields(D.CorpusSpec)} - {"truth_table"}
DERIVED_MODEL_KEYS = {"vocab_size", "pe_vocab_size"}


class CommandError(Exception):
    pass


class Outputs:
    """Files written by a command; removed again if the command fails."""

    def __init__(self, directory):
        self.directory = directory
        self.created_dir = False
        self.paths = []

    def path(self, name):
        if self.directory is None:
            raise CommandError("--out is required for this command")
        if not os.path.isdir(self.directory):
            os.makedirs(self.directory)
            self.created_dir = True
        p = os.path.join(self.directory, name)
        self.paths.append(p)
        return p

    def write_text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def rollback(self):
        for p in self.paths:
            if os.path.exists(p):
                os.unlink(p)
        if self.created_dir and os.path.isdir(self.directory) and not os.listdir(self.directory):
            os.rmdir(self.directory)


# ------------------------------------------------------------------ configuration

def resolve_config(args):
    preset = PRESETS[args.preset]
    cfg = {
        "preset": args.preset,
        "model": {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
                  for k, v in preset["model"].items()},
        "train": dict(preset["train"]),
        "corpus": dict(preset["corpus"]),
    }
    if args.config:
        user = load_json_config(args.config)
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(user) - {"model", "train", "corpus"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for section, allowed in (("model", {f.name for f in fields(ModelConfig)} - DERIVED_MODEL_KEYS),
                                 ("train", {f.name for f in fields(TrainConfig)}),
                                 ("corpus", CORPUS_KEYS)):
            sub = user.get(section, {})
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {section}: {sorted(bad)}")
            for k, v in sub.items():
                if isinstance(v, dict) and isinstance(cfg[section].get(k), dict):
                    cfg[section][k] = {**cfg[section][k], **v}
                else:
                    cfg[section][k] = v
    if args.seed is not None:
        cfg["corpus"]["seed"] = cfg["train"]["seed"] = cfg["model"]["seed"] = args.seed
    if args.mode is not None:
        cfg["model"]["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    TrainConfig(**cfg["train"])
    ModelConfig.from_dict({k: v for k, v in cfg["model"].items()})
    return cfg


def corpus_spec(cfg):
    c = dict(cfg["corpus"])
    for k in ("frames", "context_turns"):
        if k in c:
            c[k] = tuple(c[k])
    spec = D.CorpusSpec(**c)
    spec.validate()
    return spec


def read_data(path):
    if not path:
        raise CommandError("--data is required for this command")
    corpus = D.load_jsonl(path)
    if not corpus:
        raise CommandError(f"{path}: no instances")
    vpath = os.path.join(os.path.dirname(os.path.abspath(path)), "variants.json")
    variants = D.VariantTable()
    if os.path.exists(vpath):
        with open(vpath, encoding="utf-8") as fh:
            variants = D.VariantTable.from_dict(json.load(fh))
    return corpus, variants


def _need(value, flag):
    if not value:
        raise CommandError(f"{flag} is required for this command")
    return value


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg, out):
    gen = D.CorpusGenerator(corpus_spec(cfg))
    D.write_jsonl(gen.generate(), out.path("corpus.jsonl"))
    out.write_json("variants.json", gen.variant_table.to_dict())
    return 0


def cmd_train(args, cfg, out):
    corpus, variants = read_data(args.data)
    vocab = D.build_vocab(corpus)
    mc = model_config_for(corpus, vocab, variants, cfg["model"], cfg["model"].get("seed", 0))
    tc = TrainConfig(**cfg["train"])
    s = ModelState(mc, vocab, variants)
    lines = train_model(s, split(corpus, "train"), tc)
    out.write_text("loss.log", "".join(line + "\n" for line in lines))
    save_checkpoint(s, out.path("checkpoint.bin"))
    print(f"trained {s.parameter_count()} parameters for {tc.epochs} epochs ({len(lines)} steps)")
    return 0


def cmd_evaluate(args, cfg, out):
    corpus, _ = read_data(args.data)
    eval_set = split(corpus, args.split)
    if not eval_set:
        raise CommandError(f"split {args.split!r} is empty")
    refs = [i.explanation for i in eval_set]
    if args.gold_as_prediction:
        preds = refs
    elif args.predictions:
        with open(args.predictions, encoding="utf-8") as fh:
            preds = [json.loads(line)["explanation"].split() for line in fh if line.strip()]
        if len(preds) != len(refs):
            raise CommandError(f"{len(preds)} predictions for {len(refs)} references")
    else:
        s = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
        table, _ = evaluate(s, eval_set, cfg["train"].get("eval_batch_size", 64))
        preds = None
    table = score_corpus(preds, refs) if preds is not None else table
    out.write_json("scores.json", table.to_dict())
    text = format_table({args.split: table})
    out.write_text("scores.txt", text + "\n")
    print(text)
    return 0


def cmd_explain(args, cfg, out):
    corpus, _ = read_data(args.data)
    s = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    items = split(corpus, args.split)
    preds = generate(items, s, cfg["train"].get("eval_batch_size", 64))
    lines = [json.dumps({"index": k, "target": " ".join(inst.target[1]), "explanation": " ".join(p)},
                        ensure_ascii=False, sort_keys=True) + "\n"
             for k, (inst, p) in enumerate(zip(items, preds))]
    out.write_text("explanations.jsonl", "".join(lines))
    return 0


def _seeds(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def cmd_ablate(args, cfg, out):
    corpus, variants = read_data(args.data)
    tc = TrainConfig(**cfg["train"])
    base = {k: v for k, v in cfg["model"].items() if k not in ("mode", "attention", "combine", "use_pe", "seed")}
    report = run_ablation_suite(corpus, variants, base, tc, _seeds(args.seeds), eval_split=args.split)
    out.write_json("ablation.json", report.to_dict())
    out.write_text("ablation.txt", report.format() + "\n")
    print(report.format())
    return 0


def cmd_affect_eval(args, cfg, out):
    corpus, _ = read_data(args.data)
    explainer = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    tc = TrainConfig(**cfg["train"])
    base = {k: v for k, v in cfg["model"].items() if k not in ("mode", "use_pe", "seed")}
    result = run_affect_eval(corpus, explainer, args.task, base, tc, tc.seed, args.split)
    out.write_json("affect.json", result.to_dict())
    out.write_text("affect.txt", result.format() + "\n")
    print(result.format())
    return 0


def cmd_validate_stats(args, cfg, out):
    corpus, _ = read_data(args.data)
    if args.expected:
        with open(args.expected, encoding="utf-8") as fh:
            expected = json.load(fh)
    else:
        expected = {"sarcasm": D.WITS_SARCASM_COUNTS, "humour": D.WITS_HUMOUR_COUNTS,
                    "emotion": D.WITS_EMOTION_COUNTS}[args.task]
    report = D.validate_stats(corpus, expected)
    if args.out:
        out.write_json("stats.json", report.to_dict())
    for s, label, exp, got, delta in report.deltas:
        print(f"{s}/{label}: expected {exp}, observed {got} ({delta:+d})")
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "evaluate": cmd_evaluate, "explain": cmd_explain,
    "ablate": cmd_ablate, "affect-eval": cmd_affect_eval, "validate-stats": cmd_validate_stats,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with model/train/corpus sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="corpus JSONL")
    common.add_argument("--checkpoint")
    common.add_argument("--split", default="test", choices=D.SPLITS)
    parser = argparse.ArgumentParser(prog="mmfuse", description="multimodal explanation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train":
            p.add_argument("--epochs", type=int)
        if name == "evaluate":
            p.add_argument("--predictions", help="JSONL with an 'explanation' field per line")
            p.add_argument("--gold-as-prediction", action="store_true")
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2")
        if name in ("affect-eval", "validate-stats"):
            p.add_argument("--task", choices=sorted(TASK_CLASSES), default="sarcasm")
        if name == "validate-stats":
            p.add_argument("--expected", help="JSON {split: {label: count}}")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("MOSES_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    out = Outputs(args.out)
    try:
        cfg = resolve_config(args)
        if args.out and args.command != "validate-stats":
            out.write_json("config.json", cfg)
        return HANDLERS[args.command](args, cfg, out)
    except (ConfigError, CommandError, D.SpecError, D.DataError, CorruptCheckpointError,
            OSError, ValueError, TypeError) as exc:
        out.rollback()
        print(f"mmfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BaseException:
        out.rollback()
        raise


if __name__ == "__main__":
    sys.exit(main())
