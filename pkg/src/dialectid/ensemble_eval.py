"""Multiplicative ensembling, classification metrics and length analysis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-12
HIST_MAX = 30
OVERFLOW_LABEL = f"length > {HIST_MAX}"


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- ensembling


def ensemble(dists: Sequence) -> np.ndarray:
    """Combine member distributions by element-wise product, renormalized.

    Works on a single example (each member a C-vector) or a batch (each
    member ``(n, C)``). The product is taken in log space with every entry
    floored at ``PROB_FLOOR``, so one member's hard zero cannot veto a class.
    """
    if len(dists) == 0:
        raise EvalError("ensemble needs at least one member")
    arrs = [np.asarray(d, dtype=np.float64) for d in dists]
    if len({a.shape for a in arrs}) != 1:
        raise EvalError(f"ensemble members disagree in shape: {[a.shape for a in arrs]}")
    if len(arrs) == 1:
        return arrs[0].copy()
    logp = np.sum([np.log(np.maximum(a, PROB_FLOOR)) for a in arrs], axis=0)
    logp -= logp.max(axis=-1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- metrics


def confusion_matrix(gold, pred, num_classes: int) -> np.ndarray:
    """Rows are gold labels, columns predictions."""
    gold, pred = np.asarray(gold, dtype=np.int64), np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise EvalError(f"gold and pred lengths differ: {gold.shape} vs {pred.shape}")
    for name, arr in (("gold", gold), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise EvalError(f"{name} label id out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def per_class_f1(confusion) -> list[float]:
    cm = np.asarray(confusion)
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        precision = _ratio(tp, int(cm[:, c].sum()))
        recall = _ratio(tp, int(cm[c, :].sum()))
        out.append(_ratio(2 * precision * recall, precision + recall))
    return out


def macro_f1(confusion) -> tuple[float, list[float]]:
    """Unweighted mean F1 over every configured class; 0/0 counts as 0."""
    scores = per_class_f1(confusion)
    return sum(scores) / len(scores), scores


def accuracy(confusion) -> float:
    cm = np.asarray(confusion)
    total = int(cm.sum())
    if total == 0:
        raise EvalError("accuracy of an empty confusion matrix is undefined")
    return int(np.trace(cm)) / total


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    confusion: np.ndarray
    support: list
    labels: list | None = None

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1),
            "support": list(self.support),
            "confusion": self.confusion.tolist(),
            "labels": None if self.labels is None else list(self.labels),
        }


def evaluate_predictions(gold, pred, num_classes: int, labels=None) -> EvalReport:
    cm = confusion_matrix(gold, pred, num_classes)
    macro, per_class = macro_f1(cm)
    return EvalReport(
        accuracy=accuracy(cm),
        macro_f1=macro,
        per_class_f1=per_class,
        confusion=cm,
        support=[int(s) for s in cm.sum(axis=1)],
        labels=labels,
    )


# ---------------------------------------------------------------- length fits


@dataclass
class ErlangFit:
    k: int
    lam: float
    gamma_shape: float
    sample_mean: float
    sample_variance: float
    median: float
    n: int

    def to_dict(self):
        return {
            "k": self.k,
            "lambda": self.lam,
            "gamma_shape": self.gamma_shape,
            "mean": self.sample_mean,
            "variance": self.sample_variance,
            "median": self.median,
            "n": self.n,
        }


def fit_erlang(lengths) -> ErlangFit:
    """Method-of-moments Erlang fit: rate = mean/variance, shape = mean²/variance.

    Variance uses the population (1/n) denominator. The integer shape is the
    rounded gamma shape, never below 1.
    """
    x = np.asarray(lengths, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise EvalError("fit_erlang needs at least 2 samples")
    if (x <= 0).any():
        raise EvalError("fit_erlang needs positive lengths")
    mean = float(x.mean())
    var = float(((x - mean) ** 2).mean())
    if var == 0.0:
        raise EvalError("fit_erlang: zero variance, the fit is degenerate")
    shape = mean * mean / var
    return ErlangFit(
        k=max(1, int(math.floor(shape + 0.5))),
        lam=mean / var,
        gamma_shape=shape,
        sample_mean=mean,
        sample_variance=var,
        median=float(np.median(x)),
        n=int(x.size),
    )


def length_histogram(lengths) -> dict[str, int]:
    """Counts for lengths 0..30 plus one pooled overflow bucket."""
    lengths = np.asarray(lengths, dtype=np.int64)
    hist = {str(n): int((lengths == n).sum()) for n in range(HIST_MAX + 1)}
    hist[OVERFLOW_LABEL] = int((lengths > HIST_MAX).sum())
    return hist


@dataclass
class LengthAnalysis:
    fits: dict
    histograms: dict
    notices: list = field(default_factory=list)

    def to_dict(self):
        return {
            "erlang": {k: (v.to_dict() if v is not None else None) for k, v in self.fits.items()},
            "histogram": self.histograms,
            "notices": list(self.notices),
        }


def length_analysis(pred, gold, word_lengths) -> LengthAnalysis:
    """Erlang fits and histograms of word lengths split by prediction correctness.

    Zero-length examples (only USER/URL tokens) appear in the histograms but
    are left out of the fits, whose support is strictly positive.
    """
    pred, gold = np.asarray(pred), np.asarray(gold)
    lengths = np.asarray(word_lengths, dtype=np.int64)
    if not (len(pred) == len(gold) == len(lengths)):
        raise EvalError("pred, gold and word_lengths must be aligned")
    correct = pred == gold
    parts = {"correct": lengths[correct], "wrong": lengths[~correct], "all": lengths}
    fits, notices = {}, []
    for name, part in parts.items():
        positive = part[part > 0]
        if len(positive) < len(part):
            notices.append(f"{name}: {len(part) - len(positive)} zero-length examples excluded from the fit")
        if len(positive) < 2:
            fits[name] = None
            notices.append(f"{name}: fewer than 2 samples, fit omitted")
            continue
        try:
            fits[name] = fit_erlang(positive)
        except EvalError as e:
            fits[name] = None
            notices.append(f"{name}: {e}")
    hists = {name: length_histogram(part) for name, part in parts.items()}
    return LengthAnalysis(fits, hists, notices)


# ---------------------------------------------------------------- files


@dataclass
class PredictionRecord:
    id: str
    gold: str | None
    probs: dict
    pred: str


def write_predictions(path, records: Sequence[PredictionRecord]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "gold": r.gold, "probs": r.probs, "pred": r.pred},
                                ensure_ascii=False) + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(PredictionRecord(str(obj["id"]), obj.get("gold"), dict(obj["probs"]), obj["pred"]))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise EvalError(f"{path}: line {lineno}: malformed prediction record ({e})") from None
    if not records:
        raise EvalError(f"{path}: no prediction records")
    return records


def records_to_arrays(records: Sequence[PredictionRecord]):
    """Return (labels, probability matrix) for prediction records sharing a label order."""
    labels = list(records[0].probs)
    for r in records:
        if list(r.probs) != labels:
            raise EvalError(f"record {r.id!r}: label order differs from the first record")
    return labels, np.array([[r.probs[l] for l in labels] for r in records], dtype=np.float64)


def make_records(ids, gold_names, probs: np.ndarray, labels: Sequence[str]) -> list[PredictionRecord]:
    from .heads import predict

    preds = predict(probs)
    return [
        PredictionRecord(str(i), g, {l: float(p) for l, p in zip(labels, row)}, labels[int(k)])
        for i, g, row, k in zip(ids, gold_names, probs, preds)
    ]


def ensemble_records(members: Sequence[Sequence[PredictionRecord]]) -> list[PredictionRecord]:
    """Ensemble whole prediction files; ids must align line by line."""
    if not members:
        raise EvalError("no prediction files to ensemble")
    base = members[0]
    labels, _ = records_to_arrays(base)
    arrays = []
    for m, recs in enumerate(members):
        if len(recs) != len(base):
            raise EvalError(f"member {m} has {len(recs)} records, expected {len(base)}")
        for a, b in zip(base, recs):
            if a.id != b.id:
                raise EvalError(f"id misalignment in member {m}: expected {a.id!r}, found {b.id!r}")
        member_labels, arr = records_to_arrays(recs)
        if member_labels != labels:
            raise EvalError(f"member {m} label set differs from member 0")
        arrays.append(arr)
    combined = ensemble(arrays)
    return make_records([r.id for r in base], [r.gold for r in base], combined, labels)


def report_from_records(records: Sequence[PredictionRecord]) -> EvalReport:
    labels, _ = records_to_arrays(records)
    index = {l: i for i, l in enumerate(labels)}
    missing = [r.id for r in records if r.gold is None or r.gold not in index]
    if missing:
        raise EvalError(f"records without a known gold label, first: {missing[0]!r}")
    gold = [index[r.gold] for r in records]
    pred = [index[r.pred] for r in records]
    return evaluate_predictions(gold, pred, len(labels), labels)
