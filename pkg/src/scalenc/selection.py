"""Greedy stepwise feature selection scored by validation negative log-likelihood."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import SoftmaxProbe

log = logging.getLogger(__name__)

PROBE_STEPS = 200
PROBE_LR = 0.05
BACKWARD_SLACK = 0.05
SLACK_MODES = ("tolerance", "margin")


@dataclass
class SelectionData:
    """Train/validation matrices standardised with training statistics."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    num_classes: int
    usable: list[int]
    warnings: list[str] = field(default_factory=list)

    @property
    def num_features(self) -> int:
        return self.X_train.shape[1]


def prepare(features, labels, split) -> SelectionData:
    """Standardise with train-split mean/std; constant columns are flagged unusable."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    train_idx, val_idx = (np.asarray(s, dtype=np.int64) for s in split)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("selection needs non-empty train and validation splits")
    mu = X[train_idx].mean(axis=0)
    sd = X[train_idx].std(axis=0)
    warnings = []
    usable = []
    for j in range(X.shape[1]):
        if sd[j] > 0 and np.isfinite(sd[j]):
            usable.append(j)
        else:
            warnings.append(f"feature {j} is constant on the training split; skipped")
    for w in warnings:
        log.warning(w)
    Z = (X - mu) / np.where(sd > 0, sd, 1.0)
    num_classes = int(y.max()) + 1
    return SelectionData(Z[train_idx], y[train_idx], Z[val_idx], y[val_idx], num_classes, usable, warnings)


def base_rate_nll(y_train, y_val, num_classes: int) -> float:
    """NLL on validation of the feature-free model predicting training class frequencies."""
    counts = np.bincount(y_train, minlength=num_classes).astype(np.float64)
    p = counts / counts.sum()
    return float(-np.mean(np.log(p[y_val] + 1e-12)))


class Scorer:
    """Validation NLL/accuracy of a probe retrained on a feature subset, memoised per subset."""

    def __init__(self, data: SelectionData, steps: int = PROBE_STEPS, lr: float = PROBE_LR):
        self.data = data
        self.steps = steps
        self.lr = lr
        self._cache: dict[tuple[int, ...], tuple[float, float]] = {}

    def evaluate(self, subset) -> tuple[float, float]:
        key = tuple(sorted(int(i) for i in subset))
        if key not in self._cache:
            d = self.data
            if not key:
                nll = base_rate_nll(d.y_train, d.y_val, d.num_classes)
                counts = np.bincount(d.y_train, minlength=d.num_classes)
                acc = float(np.mean(d.y_val == counts.argmax()))
            else:
                cols = list(key)
                probe = SoftmaxProbe(d.num_classes, steps=self.steps, lr=self.lr)
                probe.fit(d.X_train[:, cols], d.y_train)
                nll = probe.nll(d.X_val[:, cols], d.y_val)
                acc = float(np.mean(probe.predict(d.X_val[:, cols]) == d.y_val))
            self._cache[key] = (nll, acc)
        return self._cache[key]

    def nll(self, subset) -> float:
        return self.evaluate(subset)[0]


@dataclass
class SelectionPath:
    selected: list[int]
    steps: list[tuple[int, float]]  # (feature changed, NLL after the change)
    start_nll: float

    @property
    def final_nll(self) -> float:
        return self.steps[-1][1] if self.steps else self.start_nll


def _forward(scorer: Scorer) -> SelectionPath:
    current: list[int] = []
    cur_nll = scorer.nll(current)
    start = cur_nll
    steps = []
    remaining = list(scorer.data.usable)
    while remaining:
        best_j, best_nll = None, np.inf
        for j in remaining:  # ascending, so strict < keeps the lowest index on ties
            v = scorer.nll(current + [j])
            if v < best_nll:
                best_j, best_nll = j, v
        if not best_nll < cur_nll:
            break
        current.append(best_j)
        remaining.remove(best_j)
        cur_nll = best_nll
        steps.append((best_j, best_nll))
    return SelectionPath(sorted(current), steps, start)


def _backward(scorer: Scorer, slack: float, mode: str) -> SelectionPath:
    if mode not in SLACK_MODES:
        raise ValueError(f"slack mode must be one of {SLACK_MODES}, got {mode!r}")
    # tolerance: a removal may cost up to `slack` NLL; margin: it must gain more than `slack`
    allowance = slack if mode == "tolerance" else -slack
    current = list(scorer.data.usable)
    cur_nll = scorer.nll(current)
    start = cur_nll
    steps = []
    while current:
        best_j, best_nll = None, np.inf
        for j in current:
            v = scorer.nll([i for i in current if i != j])
            if v < best_nll:
                best_j, best_nll = j, v
        if not best_nll - allowance < cur_nll:
            break
        current.remove(best_j)
        cur_nll = best_nll
        steps.append((best_j, best_nll))
    return SelectionPath(sorted(current), steps, start)


def forward_select(features, labels, split, steps: int = PROBE_STEPS, lr: float = PROBE_LR) -> list[int]:
    """Greedily add the feature that lowers validation NLL most; stop when none does."""
    return _forward(Scorer(prepare(features, labels, split), steps, lr)).selected


def backward_select(features, labels, split, slack: float = BACKWARD_SLACK, mode: str = "tolerance",
                    steps: int = PROBE_STEPS, lr: float = PROBE_LR) -> list[int]:
    """Greedily drop features from the full set while the slack rule accepts the removal."""
    return _backward(Scorer(prepare(features, labels, split), steps, lr), slack, mode).selected


@dataclass
class SelectionReport:
    best: list[int]
    best_name: str
    candidates: dict[str, list[int]]
    nll: dict[str, float]
    accuracy: dict[str, float]
    forward_path: SelectionPath
    backward_path: SelectionPath
    warnings: list[str]

    def rows(self) -> list[dict]:
        return [
            {"candidate": name, "features": " ".join(map(str, idx)), "size": len(idx),
             "nll": self.nll[name], "accuracy": self.accuracy[name], "chosen": name == self.best_name}
            for name, idx in self.candidates.items()
        ]

    def write_csv(self, path, names=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["candidate", "size", "nll", "accuracy", "chosen", "features"])
            w.writeheader()
            for row in self.rows():
                if names is not None:
                    row["features"] = " ".join(names[int(i)] for i in row["features"].split())
                w.writerow(row)


def select_best(features, labels, split, slack: float = BACKWARD_SLACK, mode: str = "tolerance",
                steps: int = PROBE_STEPS, lr: float = PROBE_LR) -> SelectionReport:
    """Run both directions, then keep whichever of forward, backward, their
    intersection and their union scores the lowest validation NLL. Ties go to
    the smaller set, then to the earlier candidate in that list."""
    data = prepare(features, labels, split)
    scorer = Scorer(data, steps, lr)
    fwd = _forward(scorer)
    bwd = _backward(scorer, slack, mode)
    f, b = set(fwd.selected), set(bwd.selected)
    candidates = {
        "forward": sorted(f),
        "backward": sorted(b),
        "intersection": sorted(f & b),
        "union": sorted(f | b),
    }
    nll, acc = {}, {}
    for name, idx in candidates.items():
        nll[name], acc[name] = scorer.evaluate(idx)
    order = list(candidates)
    best_name = min(order, key=lambda n: (nll[n], len(candidates[n]), order.index(n)))
    return SelectionReport(candidates[best_name], best_name, candidates, nll, acc, fwd, bwd, data.warnings)
