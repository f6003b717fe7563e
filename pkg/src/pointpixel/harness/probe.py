"""Linear probe on frozen features, IoU scoring and the collapse metric."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass(frozen=True)
class ProbeResult:
    per_class_iou: list[float | None]  # None: undefined or excluded
    miou: float
    excluded: list[int] = field(default_factory=list)  # classes absent from the train split

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "miou": self.miou, "excluded": self.excluded}


def per_class_iou(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> list[float | None]:
    out: list[float | None] = []
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (labels == c)))
        fp = int(np.sum((pred == c) & (labels != c)))
        fn = int(np.sum((pred != c) & (labels == c)))
        denom = tp + fp + fn
        out.append(tp / denom if denom else None)
    return out


def score(pred: np.ndarray, test_y: np.ndarray, train_y: np.ndarray, n_classes: int) -> ProbeResult:
    """IoU per class and their mean; classes never seen in training are excluded."""
    ious = per_class_iou(pred, test_y, n_classes)
    excluded = [c for c in range(n_classes) if not np.any(train_y == c)]
    for c in excluded:
        ious[c] = None
    scored = [v for v in ious if v is not None]
    return ProbeResult(ious, float(np.mean(scored)) if scored else 0.0, excluded)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_softmax(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int = 500, lr: float = 0.1):
    """Full-batch gradient descent on mean cross-entropy, zero initialization."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        g = (_softmax(x @ w + b) - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    return w, b


def linear_probe(train_x, train_y, test_x, test_y, n_classes: int, steps: int = 500, lr: float = 0.1,
                 standardize: bool = False) -> ProbeResult:
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if train_x.shape[1] != test_x.shape[1] or len(train_x) != len(train_y) or len(test_x) != len(test_y):
        raise ContractError("probe feature/label shapes disagree")
    if standardize:
        # z-score with train statistics: the linear model can absorb it, it
        # only changes how far the fixed descent budget gets
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd[sd < 1e-8] = 1.0
        train_x, test_x = (train_x - mu) / sd, (test_x - mu) / sd
    w, b = train_softmax(train_x, train_y, n_classes, steps, lr)
    return score(np.argmax(test_x @ w + b, axis=1), test_y, train_y, n_classes)


def collapse_metric(features) -> float:
    """Mean pairwise cosine similarity of unit rows: 1 = collapsed, ~0 = spread."""
    f = np.asarray(features, dtype=np.float64)
    m = f.shape[0]
    if m < 2:
        raise ContractError("collapse metric needs at least two rows")
    if np.abs(np.linalg.norm(f, axis=1) - 1.0).max() > 1e-6:
        raise ContractError("collapse metric needs unit rows")
    s = f.sum(axis=0)
    return float((s @ s - np.sum(f * f)) / (m * (m - 1)))
