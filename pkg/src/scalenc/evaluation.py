"""Frozen-embedding metrics: linear-probe accuracy, kNN accuracy, model selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff.nn import Parameter
from .autodiff.optim import AdamState, adam_step

log = logging.getLogger(__name__)

KNN_K = 50
PROBE_STEPS = 500
PROBE_LR = 0.01


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class SoftmaxProbe:
    """Single affine layer + softmax trained full-batch with Adam from a zero init.

    Zero initialisation makes the fit deterministic and, the problem being
    convex, independent of any random state.
    """

    num_classes: int
    steps: int = PROBE_STEPS
    lr: float = PROBE_LR
    weight_decay: float = 0.0
    W: np.ndarray | None = None
    b: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "SoftmaxProbe":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, d = X.shape
        W = Parameter(np.zeros((d, self.num_classes)), dtype=np.float64, name="probe.W")
        b = Parameter(np.zeros(self.num_classes), dtype=np.float64, name="probe.b")
        onehot = np.zeros((n, self.num_classes))
        onehot[np.arange(n), y] = 1.0
        state = AdamState(lr=self.lr, weight_decay=self.weight_decay)
        for _ in range(self.steps):
            p = _softmax(X @ W.data + b.data)
            diff = (p - onehot) / n
            W.grad = X.T @ diff
            b.grad = diff.sum(axis=0)
            adam_step([W, b], state, ["probe.W", "probe.b"])
        self.W, self.b = W.data, b.data
        return self

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _softmax(np.asarray(X, dtype=np.float64) @ self.W + self.b)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def nll(self, X: np.ndarray, y: np.ndarray, eps: float = 1e-12) -> float:
        p = self.predict_proba(X)
        return float(-np.mean(np.log(p[np.arange(len(y)), np.asarray(y)] + eps)))


def _check_inputs(train_emb, train_y, test_emb, test_y):
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if not (np.all(np.isfinite(train_emb)) and np.all(np.isfinite(test_emb))):
        raise ValueError("embeddings must be finite")
    return train_emb, train_y, test_emb, test_y


def _warn_unseen(train_y, test_y) -> None:
    unseen = np.setdiff1d(np.unique(test_y), np.unique(train_y))
    if unseen.size:
        log.warning("test classes %s absent from training labels; they count as errors", unseen.tolist())


def l2_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def linear_accuracy(train_emb, train_y, test_emb, test_y, steps: int = PROBE_STEPS, lr: float = PROBE_LR,
                    normalize: bool = False) -> float:
    train_emb, train_y, test_emb, test_y = _check_inputs(train_emb, train_y, test_emb, test_y)
    if np.unique(train_y).size < 2:
        raise ValueError("linear probe needs at least 2 classes in the training labels")
    if normalize:
        train_emb, test_emb = l2_rows(train_emb), l2_rows(test_emb)
    _warn_unseen(train_y, test_y)
    num_classes = int(max(train_y.max(), test_y.max())) + 1
    probe = SoftmaxProbe(num_classes, steps=steps, lr=lr).fit(train_emb, train_y)
    return float(np.mean(probe.predict(test_emb) == test_y))


def knn_predict(train_emb, train_y, test_emb, k: int = KNN_K) -> np.ndarray:
    """Majority vote over the k nearest training points (Euclidean).

    Equal distances are ordered by training index; equal vote counts go to
    the lowest class index.
    """
    train_emb = np.asarray(train_emb, dtype=np.float64)
    test_emb = np.asarray(test_emb, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_emb) == 0:
        raise ValueError("kNN needs a non-empty training set")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(k, len(train_emb))
    num_classes = int(train_y.max()) + 1
    preds = np.empty(len(test_emb), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(1, train_emb.size))
    for lo in range(0, len(test_emb), chunk):
        block = test_emb[lo : lo + chunk]
        diff = block[:, None, :] - train_emb[None, :, :]
        dist = (diff * diff).sum(axis=-1)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
        votes = np.zeros((len(block), num_classes), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(len(block)), k), train_y[nearest].ravel()), 1)
        preds[lo : lo + chunk] = votes.argmax(axis=1)
    return preds


def knn_accuracy(train_emb, train_y, test_emb, test_y, k: int = KNN_K, normalize: bool = False) -> float:
    train_emb, train_y, test_emb, test_y = _check_inputs(train_emb, train_y, test_emb, test_y)
    if normalize:
        train_emb, test_emb = l2_rows(train_emb), l2_rows(test_emb)
    _warn_unseen(train_y, test_y)
    return float(np.mean(knn_predict(train_emb, train_y, test_emb, k) == test_y))


def select_model(history):
    """Index of the entry with the highest validation kNN accuracy; ties go to the earliest.

    ``history`` is a sequence of mappings (or objects) exposing ``val_knn_acc``.
    """
    if not len(history):
        raise ValueError("model selection needs at least one checkpoint")
    scores = [h["val_knn_acc"] if isinstance(h, dict) else h.val_knn_acc for h in history]
    return int(np.argmax(scores))
