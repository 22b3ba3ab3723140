"""Command-line entry point.

Subcommands: ``build-vocab``, ``stats``, ``train``, ``predict``, ``ensemble``,
``analyze``. Run configs are flat JSON objects; values are resolved with the
precedence built-in defaults < preset < config file < ``--set key=value``.
Failures exit non-zero and print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .corpus import CorpusError, LabelSet, Vocab, build_label_set, build_vocab, corpus_stats, encode_dataset, load_tsv
from .encoder import ConfigError, ModelConfig, init_model
from .ensemble_eval import (
    EvalError,
    ensemble_records,
    evaluate_predictions,
    length_analysis,
    make_records,
    read_predictions,
    report_from_records,
    write_predictions,
)
from .heads import predict
from .numerics import NonFiniteError, ShapeError
from .training import TrainConfig, TrainingError, train, write_log

logger = logging.getLogger(__name__)

PRESETS = {"da": {"max_len": 90}, "msa": {"max_len": 110}}
RUN_KEYS = {
    "preset": "da",
    "max_len": None,
    "has_header": False,
    "train_path": None,
    "dev_path": None,
    "vocab_path": None,
    "run_dir": "runs/default",
    "init_checkpoint": None,
}
DERIVED_MODEL_KEYS = ("vocab_size", "num_classes", "max_positions")
MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name not in DERIVED_MODEL_KEYS]
TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)]


def _defaults() -> dict:
    model = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name not in DERIVED_MODEL_KEYS}
    train_cfg = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    return {**RUN_KEYS, **model, **train_cfg}


def parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError([f"override {item!r} is not of the form key=value"])
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def _problems(cls, kwargs) -> list[str]:
    try:
        cls(**kwargs)
    except ConfigError as e:
        return e.problems
    except TypeError as e:
        return [str(e)]
    return []


def resolve_config(file_values: dict, overrides: dict) -> dict:
    """Merge defaults, preset, file values and overrides; validate everything at once."""
    given = {**file_values, **overrides}
    preset = given.get("preset", RUN_KEYS["preset"])
    problems = []
    if preset not in PRESETS:
        problems.append(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = RUN_KEYS["preset"]
    resolved = {**_defaults(), **PRESETS[preset], **given, "preset": preset}

    known = set(_defaults())
    problems += [f"unknown config key {k!r}" for k in given if k not in known and k not in DERIVED_MODEL_KEYS]
    problems += [f"{k!r} is derived from the data and cannot be set" for k in given if k in DERIVED_MODEL_KEYS]
    for key in ("train_path", "dev_path", "vocab_path"):
        if not resolved.get(key):
            problems.append(f"{key} is required")
        elif not Path(resolved[key]).is_file():
            problems.append(f"{key}: file not found: {resolved[key]}")
    if resolved.get("init_checkpoint") and not Path(resolved["init_checkpoint"]).is_dir():
        problems.append(f"init_checkpoint: directory not found: {resolved['init_checkpoint']}")
    max_len = resolved.get("max_len")
    if not isinstance(max_len, int) or max_len < 3:
        problems.append("max_len must be an integer >= 3")
        max_len = 3
    model_kw = {k: resolved[k] for k in MODEL_KEYS}
    problems += _problems(ModelConfig, {**model_kw, "vocab_size": 8, "num_classes": 2, "max_positions": max_len})
    problems += _problems(TrainConfig, {k: resolved[k] for k in TRAIN_KEYS})
    if problems:
        raise ConfigError(problems)
    return resolved


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"]) from None
    if not isinstance(values, dict):
        raise ConfigError([f"{path}: config must be a JSON object"])
    return values


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_build_vocab(args):
    examples = load_tsv(args.corpus, has_header=args.has_header)
    vocab = build_vocab([ex.text for ex in examples], args.size)
    vocab.save(args.out)
    return {"vocab_size": len(vocab), "out": str(args.out)}


def cmd_stats(args):
    examples = load_tsv(args.corpus, has_header=args.has_header)
    return corpus_stats(examples, build_label_set(examples)).to_dict()


def cmd_train(args):
    overrides = dict(parse_override(item) for item in args.set or [])
    if args.run_dir:
        overrides["run_dir"] = args.run_dir
    cfg = resolve_config(_read_config_file(args.config), overrides)

    vocab = Vocab.load(cfg["vocab_path"])
    train_raw = load_tsv(cfg["train_path"], has_header=cfg["has_header"])
    dev_raw = load_tsv(cfg["dev_path"], has_header=cfg["has_header"])
    labels = build_label_set(train_raw)
    unknown = sorted({ex.label for ex in dev_raw} - set(labels.names))
    if unknown:
        raise CorpusError(f"dev labels missing from the training label set: {unknown}")
    model_cfg = ModelConfig(**{k: cfg[k] for k in MODEL_KEYS}, vocab_size=len(vocab),
                            num_classes=len(labels), max_positions=cfg["max_len"])
    train_cfg = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    train_set = encode_dataset(train_raw, vocab, labels, cfg["max_len"])
    dev_set = encode_dataset(dev_raw, vocab, labels, cfg["max_len"])

    run_dir = Path(cfg["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.resolved.json", cfg)

    model = init_model(model_cfg, seed=train_cfg.seed)
    if cfg["init_checkpoint"]:
        base, _ = load_checkpoint(cfg["init_checkpoint"])
        state = {k: v for k, v in base.state_dict().items() if not k.startswith("classifier.")}
        logger.info("initialized %d tensors from %s", len(model.load_matching(state)), cfg["init_checkpoint"])
    result = train(model, train_set, dev_set, train_cfg)

    save_checkpoint(model, run_dir / "checkpoint", metadata={
        "labels": list(labels.names),
        "vocab": vocab.tokens,
        "max_len": cfg["max_len"],
        "train_config": train_cfg.to_dict(),
        "best_dev_macro_f1": result.best_dev_f1,
        "best_step": result.best_step,
    })
    write_log(run_dir / "train_log.jsonl", result.log)
    _write_json(run_dir / "dev_report.json", result.dev_report.to_dict())
    return {
        "run_dir": str(run_dir),
        "steps": result.steps,
        "halted_early": result.halted_early,
        "best_step": result.best_step,
        "dev_accuracy": result.dev_report.accuracy,
        "dev_macro_f1": result.dev_report.macro_f1,
    }


def cmd_predict(args):
    model, meta = load_checkpoint(args.checkpoint)
    labels = LabelSet(tuple(meta["labels"]))
    vocab = Vocab(meta["vocab"])
    examples = load_tsv(args.data, has_header=args.has_header)
    unknown = sorted({ex.label for ex in examples} - set(labels.names))
    if unknown:
        raise CorpusError(f"dataset labels not in the checkpoint label set: {unknown}")
    data = encode_dataset(examples, vocab, labels, meta["max_len"])
    probs = model.predict_proba(data.token_ids, data.attention_mask)
    records = make_records(data.ids, [ex.label for ex in examples], probs, labels.names)
    write_predictions(args.out, records)
    report = evaluate_predictions(data.labels, predict(probs), len(labels), list(labels.names))
    return {"out": str(args.out), "n": len(records), "accuracy": report.accuracy, "macro_f1": report.macro_f1}


def cmd_ensemble(args):
    members = [read_predictions(p) for p in args.predictions]
    combined = ensemble_records(members)
    write_predictions(args.out, combined)
    report = report_from_records(combined).to_dict()
    report["members"] = [
        {"file": Path(p).name, **{k: v for k, v in report_from_records(m).to_dict().items() if k in ("accuracy", "macro_f1")}}
        for p, m in zip(args.predictions, members)
    ]
    if args.report:
        _write_json(args.report, report)
    return {"out": str(args.out), "n": len(combined), "accuracy": report["accuracy"], "macro_f1": report["macro_f1"]}


def cmd_analyze(args):
    records = read_predictions(args.predictions)
    examples = {ex.id: ex for ex in load_tsv(args.corpus, has_header=args.has_header)}
    missing = [r.id for r in records if r.id not in examples]
    if missing:
        raise EvalError(f"{len(missing)} prediction ids not found in the corpus, first: {missing[0]!r}")
    from .corpus import word_length

    report = report_from_records(records)
    index = {l: i for i, l in enumerate(report.labels)}
    gold = [index[r.gold] for r in records]
    pred = [index[r.pred] for r in records]
    lengths = [word_length(examples[r.id].text) for r in records]
    out = report.to_dict()
    out.update(length_analysis(pred, gold, lengths).to_dict())
    out["n"] = len(records)
    _write_json(args.out, out)
    return {"out": str(args.out), "n": len(records), "accuracy": report.accuracy, "macro_f1": report.macro_f1}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialectid", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("build-vocab", help="build a fixture WordPiece vocab from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--has-header", action="store_true")
    p.set_defaults(func=cmd_build_vocab)

    p = subs.add_parser("stats", help="per-class counts of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--has-header", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = subs.add_parser("train", help="train one model and write a run directory")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--run-dir", help="output directory (overrides run_dir)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("predict", help="write a prediction file for a labeled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--has-header", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("ensemble", help="multiply member probabilities from prediction files")
    p.add_argument("predictions", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_ensemble)

    p = subs.add_parser("analyze", help="confusion matrix, Erlang length fits and histograms")
    p.add_argument("--predictions", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--has-header", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


HANDLED = (ConfigError, CorpusError, CheckpointError, EvalError, TrainingError, ShapeError,
           NonFiniteError, OSError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except HANDLED as e:
        record = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, ConfigError):
            record["problems"] = e.problems
        print(json.dumps(record, ensure_ascii=False), file=sys.stderr)
        return 1
    print(json.dumps(summary, ensure_ascii=False, default=_json_default))
    return 0


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj).__name__)


if __name__ == "__main__":
    sys.exit(main())
