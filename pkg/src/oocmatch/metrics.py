"""Confusion counts and classification metrics with out-of-context as the positive class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .data import PairedSample
from .encoders import Model
from .inference import Prediction, Thresholds, predict


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    seed: int | None = None
    model_tag: str = ""
    train_size: int | None = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float | None:
        return _ratio(self.tp + self.tn, self.total)

    @property
    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float | None:
        p, r = self.precision, self.recall
        if p is None or r is None or p + r == 0:
            return None
        return 2 * p * r / (p + r)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "seed": self.seed,
                "model_tag": self.model_tag, "train_size": self.train_size}


def confusion(labels: Sequence[bool], predictions: Sequence[bool], **meta) -> MetricsReport:
    if len(labels) != len(predictions):
        raise ValueError("labels and predictions differ in length")
    tp = sum(1 for y, p in zip(labels, predictions) if y and p)
    fp = sum(1 for y, p in zip(labels, predictions) if not y and p)
    tn = sum(1 for y, p in zip(labels, predictions) if not y and not p)
    fn = sum(1 for y, p in zip(labels, predictions) if y and not p)
    return MetricsReport(tp, fp, tn, fn, **meta)


def evaluate(model: Model, test_set: Sequence[PairedSample], thresholds: Thresholds = Thresholds(),
             **meta) -> tuple[MetricsReport, list[Prediction]]:
    """Run the decision rule on every labelled record and tally the confusion matrix."""
    unlabeled = [s.id for s in test_set if s.ooc_label is None]
    if unlabeled:
        raise ValueError(f"evaluation needs labelled records; {len(unlabeled)} unlabelled (first: {unlabeled[0]})")
    embedder = model.make_embedder()
    preds = [predict(model, s, thresholds, embedder) for s in test_set]
    report = confusion([s.ooc_label for s in test_set], [p.verdict for p in preds], **meta)
    return report, preds
