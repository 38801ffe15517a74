"""Classification report, AUC, and their text/JSON renderings."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError

STATE_NAMES = ("low", "medium", "high", "attack")


def confusion_matrix(true, pred, num_classes: int = 4) -> np.ndarray:
    """``counts[t, p]``: rows are true classes, columns predictions."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape:
        raise DataError(f"label arrays differ in length: {true.size} vs "
                        f"{pred.size}")
    for arr in (true, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"labels must lie in 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


@dataclass
class ClassReport:
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


@dataclass
class ClassificationReport:
    classes: list[ClassReport]
    accuracy: float
    mean_recall: float
    confusion: np.ndarray
    undefined_precision: list[int] = field(default_factory=list)

    def to_dict(self, names=STATE_NAMES) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_recall": self.mean_recall,
            "classes": [
                {"state": names[i], "precision": c.precision,
                 "recall": c.recall, "f1": c.f1, "support": c.support}
                for i, c in enumerate(self.classes)],
            "undefined_precision": [names[i] for i in self.undefined_precision],
            "confusion": self.confusion.tolist(),
        }

    def to_text(self, names=STATE_NAMES) -> str:
        lines = [f"{'Risk state':<12}{'Precision(%)':>14}{'Recall(%)':>11}"
                 f"{'F1 score(%)':>13}{'Support':>9}"]
        for i, c in enumerate(self.classes):
            lines.append(f"{names[i]:<12}{100 * c.precision:>14.2f}"
                         f"{100 * c.recall:>11.2f}{100 * c.f1:>13.2f}"
                         f"{c.support:>9d}")
        lines.append(f"accuracy {100 * self.accuracy:.2f}  "
                     f"mean recall {100 * self.mean_recall:.2f}")
        if self.undefined_precision:
            lines.append("no predictions for: " + ", ".join(
                names[i] for i in self.undefined_precision))
        return "\n".join(lines)


def report(true, pred, num_classes: int = 4) -> ClassificationReport:
    """Per-class precision/recall/F1/support plus accuracy and mean recall.

    A class that is never predicted gets precision 0 and is listed in
    ``undefined_precision``.
    """
    cm = confusion_matrix(true, pred, num_classes)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    classes = []
    for c in range(num_classes):
        p = _ratio(tp[c], predicted[c])
        r = _ratio(tp[c], support[c])
        classes.append(ClassReport(p, r, f1_score(p, r), int(support[c]),
                                   int(predicted[c])))
    total = cm.sum()
    return ClassificationReport(
        classes=classes,
        accuracy=_ratio(tp.sum(), total),
        mean_recall=float(np.mean([c.recall for c in classes])),
        confusion=cm,
        undefined_precision=[c for c in range(num_classes) if predicted[c] == 0],
    )


def predict_labels(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted half."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC is undefined without both positive and "
                        "negative samples")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # average rank (1-based) over tie groups
    new_group = np.r_[True, s[1:] != s[:-1]]
    starts = np.flatnonzero(new_group)
    ends = np.r_[starts[1:], s.size]
    ranks = (0.5 * (starts + 1 + ends))[np.cumsum(new_group) - 1]
    rank_sum = ranks[pos[order]].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class BinaryReport:
    precision: float
    recall: float
    f1: float
    auc: float
    support: int

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall,
                "f1": self.f1, "auc": self.auc, "support": self.support}

    def to_text(self) -> str:
        return (f"{'Precision(%)':>12}{'Recall(%)':>11}{'F1 score(%)':>13}"
                f"{'Auc':>8}\n{100 * self.precision:>12.2f}"
                f"{100 * self.recall:>11.2f}{100 * self.f1:>13.2f}"
                f"{self.auc:>8.4f}")


def binary_report(scores, labels, threshold: float = 0.5) -> BinaryReport:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    pred = (scores >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (labels == 1)).sum())
    p = _ratio(tp, pred.sum())
    r = _ratio(tp, labels.sum())
    return BinaryReport(p, r, f1_score(p, r), auc(scores, labels),
                        int(labels.sum()))
