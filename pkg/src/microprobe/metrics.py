"""Confusion accounting and macro-F1 for pixel- and object-level predictions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class ConfusionMatrix:
    """K x K count matrix; rows are true classes, columns predicted classes.

    Class indices run 1..K; the unlabeled value 0 never enters the matrix.
    Matrices over the same K merge by addition, so per-image evaluation can
    run in parallel and be summed afterwards.
    """

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        if n_classes < 2:
            raise ValueError(f"need at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        if counts is None:
            self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (n_classes, n_classes):
                raise ValueError(f"counts shape {counts.shape} != ({n_classes},{n_classes})")
            if (counts < 0).any():
                raise ValueError("confusion counts must be non-negative")
            self.counts = counts

    def add(self, true_class: int, pred_class: int, n: int = 1) -> None:
        self.counts[true_class - 1, pred_class - 1] += n

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different K")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    def true_positives(self, c: int) -> int:
        return int(self.counts[c - 1, c - 1])

    def false_positives(self, c: int) -> int:
        return int(self.counts[:, c - 1].sum() - self.counts[c - 1, c - 1])

    def false_negatives(self, c: int) -> int:
        return int(self.counts[c - 1, :].sum() - self.counts[c - 1, c - 1])


def macro_f1(cm: ConfusionMatrix) -> float:
    """Unweighted mean over classes of the harmonic mean of precision and recall.

    A class with no true, predicted, or missed instances (TP+FP+FN = 0) is
    excluded from the average; a class where precision + recall is zero
    contributes an F1 of 0. Raises if no class has any counts at all.
    """
    scores = []
    for c in range(1, cm.n_classes + 1):
        tp = cm.true_positives(c)
        fp = cm.false_positives(c)
        fn = cm.false_negatives(c)
        if tp + fp + fn == 0:
            continue
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        if precision + recall == 0.0:
            scores.append(0.0)
        else:
            scores.append(2.0 * precision * recall / (precision + recall))
    if not scores:
        raise ValueError("macro_f1 undefined: no class has any counts")
    return sum(scores) / len(scores)


def weighted_f1(cm: ConfusionMatrix) -> float:
    """Support-weighted mean of per-class F1 (support = true count per class)."""
    total = 0.0
    support_sum = 0
    for c in range(1, cm.n_classes + 1):
        tp = cm.true_positives(c)
        fp = cm.false_positives(c)
        fn = cm.false_negatives(c)
        support = tp + fn
        if support == 0:
            continue
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
        total += f1 * support
        support_sum += support
    if support_sum == 0:
        raise ValueError("weighted_f1 undefined: no labeled instances")
    return total / support_sum


def evaluate_pixels(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> ConfusionMatrix:
    """Count pixel agreements, ignoring positions where truth is unlabeled (0)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    labeled = truth > 0
    if not labeled.any():
        raise ValueError("truth has no labeled pixels; metric undefined")
    t = truth[labeled].astype(np.int64)
    p = pred[labeled].astype(np.int64)
    if (t > n_classes).any() or (p > n_classes).any():
        raise ValueError(f"labels exceed class count {n_classes}")
    # a KxK matrix cannot represent "predicted nothing"; classifiers here
    # always emit a class in 1..K
    if (p < 1).any():
        raise ValueError("prediction contains unlabeled pixels (0) at labeled positions")
    tally = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)
    np.add.at(tally, (t, p), 1)
    return ConfusionMatrix(n_classes, tally[1:, 1:])


def evaluate_objects(pred: Mapping[int, int], truth: Mapping[int, int],
                     n_classes: int) -> ConfusionMatrix:
    """Count per-object agreements; id sets must match exactly."""
    pred_ids = set(pred)
    truth_ids = set(truth)
    if pred_ids != truth_ids:
        only_pred = sorted(pred_ids - truth_ids)[:10]
        only_truth = sorted(truth_ids - pred_ids)[:10]
        raise ValueError(
            f"object id mismatch: only in prediction {only_pred}, only in truth {only_truth}"
        )
    cm = ConfusionMatrix(n_classes)
    for oid in truth:
        cm.add(truth[oid], pred[oid])
    return cm


@dataclass
class RunRecord:
    """One experiment cell: a single (fold, repeat, budget) training run."""

    method: str
    model: str
    budget: str
    fold: int
    repeat: int
    f1: float
    train_s: float
    infer_s_per_image: float

    def __post_init__(self):
        if not (0.0 <= self.f1 <= 1.0):
            raise ValueError(f"F1 out of range: {self.f1}")
        if self.train_s < 0 or self.infer_s_per_image < 0:
            raise ValueError("times must be non-negative")


RESULT_FIELDS = ["method", "model", "budget", "fold", "repeat", "f1",
                 "train_s", "infer_s_per_image"]


def write_records_csv(records: Iterable[RunRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for r in records:
            writer.writerow([r.method, r.model, r.budget, r.fold, r.repeat,
                             f"{r.f1:.6f}", f"{r.train_s:.6f}",
                             f"{r.infer_s_per_image:.6f}"])


def read_records_csv(path) -> list[RunRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RunRecord(
                method=row["method"], model=row["model"], budget=row["budget"],
                fold=int(row["fold"]), repeat=int(row["repeat"]),
                f1=float(row["f1"]), train_s=float(row["train_s"]),
                infer_s_per_image=float(row["infer_s_per_image"])))
    return out


def aggregate_runs(records: Iterable[RunRecord]) -> dict[tuple[str, str, str], tuple[float, float]]:
    """Group records by (method, model, budget) -> (mean F1, sample std).

    Uses the n-1 standard deviation; a single record yields std 0.
    """
    groups: dict[tuple[str, str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.method, r.model, r.budget), []).append(r.f1)
    out = {}
    for key, vals in groups.items():
        mean = sum(vals) / len(vals)
        if len(vals) < 2:
            std = 0.0
        else:
            std = math.sqrt(sum((v - mean) ** 2 for v in vals) / (len(vals) - 1))
        out[key] = (mean, std)
    return out


def write_summary_csv(summary: Mapping[tuple[str, str, str], tuple[float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "model", "budget", "mean_f1", "std_f1"])
        for (method, model, budget), (mean, std) in sorted(summary.items()):
            writer.writerow([method, model, budget, f"{mean:.6f}", f"{std:.6f}"])
