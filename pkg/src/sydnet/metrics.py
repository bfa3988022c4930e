"""Top-k accuracy and confusion counts."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass

import numpy as np

METRICS_HEADER = ("epoch", "split", "loss", "top1", "top5", "lr")


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    top1: float
    top5: float
    lr: float

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top5 <= 100.0:
            raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def as_csv(self) -> list[str]:
        return [str(self.epoch), self.split, f"{self.loss:.6f}", f"{self.top1:.4f}", f"{self.top5:.4f}", repr(self.lr)]

    def asdict(self) -> dict:
        return asdict(self)


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties go to the lower index."""
    return np.argsort(-np.asarray(probs), axis=1, kind="stable")


def topk_hits(probs: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean hit vector: true label among the ``k`` highest probabilities."""
    probs = np.asarray(probs)
    labels = np.asarray(labels).reshape(-1)
    k = min(k, probs.shape[1])
    ranked = rank_classes(probs)[:, :k]
    return (ranked == labels[:, None]).any(axis=1)


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    hits = topk_hits(probs, labels, k)
    return 100.0 * float(hits.mean()) if hits.size else 0.0


def confusion_matrix(labels: np.ndarray, predicted: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
    return cm


def accuracy_from_confusion(cm: np.ndarray) -> float:
    total = cm.sum()
    return 100.0 * float(np.trace(cm)) / total if total else 0.0


class Accumulator:
    """Streams batch predictions into loss, top-1/top-5 and confusion counts."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.loss_sum = 0.0
        self.count = 0
        self.hits1 = 0
        self.hits5 = 0
        self.confusion = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, probs: np.ndarray, labels: np.ndarray, loss: float) -> None:
        b = len(labels)
        self.loss_sum += float(loss) * b
        self.count += b
        self.hits1 += int(topk_hits(probs, labels, 1).sum())
        self.hits5 += int(topk_hits(probs, labels, 5).sum())
        self.confusion += confusion_matrix(labels, rank_classes(probs)[:, 0], self.n_classes)

    def row(self, epoch: int, split: str, lr: float) -> MetricsRow:
        n = max(self.count, 1)
        return MetricsRow(epoch, split, self.loss_sum / n, 100.0 * self.hits1 / n, 100.0 * self.hits5 / n, lr)


def write_metrics_csv(path: str | os.PathLike, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def write_confusion_csv(path: str | os.PathLike, cm: np.ndarray) -> None:
    np.savetxt(path, cm, fmt="%d", delimiter=",")
