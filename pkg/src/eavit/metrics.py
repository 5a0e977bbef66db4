"""Confusion matrices and per-class precision / recall / F1."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[true, predicted]``."""

    counts: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.counts.shape[0])]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def classes(self) -> int:
        return self.counts.shape[0]


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    undefined: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class: list[ClassScores]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: ConfusionMatrix | None = None


def confusion(preds: Sequence[int], labels: Sequence[int], classes: int | None = None,
              class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions, {labels.size} labels")
    if preds.size == 0:
        raise ValueError("cannot build a confusion matrix from no samples")
    if classes is None:
        classes = len(class_names) if class_names else int(max(preds.max(), labels.max())) + 1
    if min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= classes:
        raise ValueError(f"class index out of range [0, {classes})")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts, list(class_names) if class_names else [])


def accuracy(cm: ConfusionMatrix, percent: bool = False) -> float:
    """Trace over total; the multiclass reading of (TP + TN) / all."""
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    acc = float(np.trace(cm.counts)) / cm.total
    return 100.0 * acc if percent else acc


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(cm: ConfusionMatrix, k: int) -> ClassScores:
    """One-vs-rest scores for class ``k``; a zero denominator gives 0 and sets ``undefined``."""
    if not 0 <= k < cm.classes:
        raise ValueError(f"class {k} out of range [0, {cm.classes})")
    tp = int(cm.counts[k, k])
    fp = int(cm.counts[:, k].sum()) - tp
    fn = int(cm.counts[k, :].sum()) - tp
    undefined = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, undefined = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, undefined = 0.0, True
    return ClassScores(precision, recall, f1_score(precision, recall), undefined)


def report(cm: ConfusionMatrix) -> MetricsReport:
    per = [precision_recall_f1(cm, k) for k in range(cm.classes)]
    return MetricsReport(
        class_names=list(cm.class_names),
        per_class=per,
        accuracy=accuracy(cm),
        macro_precision=float(np.mean([s.precision for s in per])),
        macro_recall=float(np.mean([s.recall for s in per])),
        macro_f1=float(np.mean([s.f1 for s in per])),
        confusion=cm,
    )


def track_vote(probs: np.ndarray, track_ids: Sequence[str]) -> tuple[list[str], np.ndarray]:
    """Majority vote of segment predictions per track, ties broken by summed probability."""
    order: dict[str, list[int]] = {}
    for i, t in enumerate(track_ids):
        order.setdefault(t, []).append(i)
    winners = []
    for t, idx in order.items():
        p = probs[idx]
        votes = np.bincount(p.argmax(axis=1), minlength=p.shape[1])
        tied = np.flatnonzero(votes == votes.max())
        winners.append(int(tied[np.argmax(p[:, tied].sum(axis=0))]))
    return list(order), np.asarray(winners)


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------


def write_metrics_csv(path, rep: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1"])
        for name, s in zip(rep.class_names, rep.per_class):
            w.writerow([name, repr(s.precision), repr(s.recall), repr(s.f1)])
        w.writerow(["macro", repr(rep.macro_precision), repr(rep.macro_recall), repr(rep.macro_f1)])
        w.writerow(["accuracy", repr(rep.accuracy), "", ""])


def read_metrics_csv(path) -> MetricsReport:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["class", "precision", "recall", "f1"]:
        raise ValueError(f"{path}: bad header {rows[0]}")
    body = {r[0]: r for r in rows[1:] if r[0] in ("macro", "accuracy")}
    classes = [r for r in rows[1:] if r[0] not in ("macro", "accuracy")]
    per = [ClassScores(float(p), float(r), float(f)) for _, p, r, f in classes]
    macro = body["macro"]
    return MetricsReport(
        class_names=[r[0] for r in classes],
        per_class=per,
        accuracy=float(body["accuracy"][1]),
        macro_precision=float(macro[1]),
        macro_recall=float(macro[2]),
        macro_f1=float(macro[3]),
    )


def write_confusion_csv(path, cm: ConfusionMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cm.class_names)
        w.writerows(cm.counts.tolist())


def read_confusion_csv(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return ConfusionMatrix(np.array(rows[1:], dtype=np.int64), rows[0])


def plot_confusion(path, cm: ConfusionMatrix) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(cm.classes), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(cm.classes), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.counts.max() / 2 if cm.counts.size else 0
    for i in range(cm.classes):
        for j in range(cm.classes):
            ax.text(j, i, str(cm.counts[i, j]), ha="center", va="center",
                    color="white" if cm.counts[i, j] > thresh else "black", fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curves(path, history: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h["epoch"] for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(epochs, [h["train_acc"] for h in history], label="train")
    a1.plot(epochs, [h["val_acc"] for h in history], label="validation")
    a1.set_xlabel("epoch")
    a1.set_ylabel("accuracy")
    a1.legend()
    a2.plot(epochs, [h["train_loss"] for h in history], label="train")
    a2.plot(epochs, [h["val_loss"] for h in history], label="validation")
    a2.set_xlabel("epoch")
    a2.set_ylabel("loss")
    a2.legend()
    fig.tight_layout()
    fig.savefig(Path(path), format="svg", metadata={"Date": None})
    plt.close(fig)
