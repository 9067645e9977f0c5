"""Evaluation machinery: weighted log loss, grouped stratified folds,
threshold sweeps with weighted F1/precision/recall, confusion matrices.

The loss is the class-weighted multi-class logarithmic loss

    loss = -( sum_i w_i * sum_j (y_ij / N_i) * ln p_ij ) / sum_i w_i

with probabilities clipped to [eps, 1-eps] and rows renormalized before the
logarithm (the competition-metric convention; the raw equation is undefined
at p = 0). Classes with no observations contribute nothing to the numerator;
the denominator always sums all weights, so scaling every weight by a common
constant leaves the loss unchanged.

Thresholding follows the strict rule: predict CE iff p_CE > t, so a
probability exactly at the threshold classifies as LAA.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("CE", "LAA")
CE, LAA = 0, 1

CURVE_HEADER = ["threshold", "weighted_f1", "weighted_precision", "weighted_recall"]
CONFUSION_HEADER = ["tp", "fp", "fn", "tn"]
FOLDS_HEADER = ["patient_id", "fold"]


@dataclass
class MetricInput:
    labels: np.ndarray = field(repr=False)  # (N, M) one-hot
    probs: np.ndarray = field(repr=False)  # (N, M) rows on the simplex
    class_weights: np.ndarray = field(repr=False)  # (M,) positive

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        if self.labels.shape != self.probs.shape:
            raise ValueError(
                f"labels {self.labels.shape} and probs {self.probs.shape} must match"
            )
        if self.labels.ndim != 2:
            raise ValueError("labels/probs must be (N, M)")
        if self.class_weights.shape != (self.labels.shape[1],):
            raise ValueError("class_weights must have one entry per class")
        if np.any(self.class_weights <= 0):
            raise ValueError("class weights must be positive")
        row_sums = self.labels.sum(axis=1)
        if not (np.all(row_sums == 1.0)
                and np.all((self.labels == 0) | (self.labels == 1))):
            raise ValueError("labels must be one-hot rows")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("every probability row must sum to 1 (tol 1e-9)")

    @property
    def per_class_counts(self) -> np.ndarray:
        return self.labels.sum(axis=0)

    @classmethod
    def from_class_indices(cls, labels, probs, class_weights) -> "MetricInput":
        labels = np.asarray(labels, dtype=int)
        probs = np.asarray(probs, dtype=np.float64)
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(labels)), labels] = 1.0
        return cls(onehot, probs, np.asarray(class_weights, dtype=np.float64))


def weighted_log_loss(labels, probs, class_weights=(1.0, 1.0), eps: float = 1e-15) -> float:
    """Class-weighted log loss; ``labels`` may be class indices or one-hot rows."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        minput = MetricInput.from_class_indices(labels, probs, class_weights)
    else:
        minput = MetricInput(labels, np.asarray(probs), np.asarray(class_weights))
    return weighted_log_loss_from_input(minput, eps)


def weighted_log_loss_from_input(minput: MetricInput, eps: float = 1e-15) -> float:
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must be in (0, 0.5), got {eps}")
    counts = minput.per_class_counts
    clipped = np.clip(minput.probs, eps, 1.0 - eps)
    clipped /= clipped.sum(axis=1, keepdims=True)

    numerator = 0.0
    for i, w in enumerate(minput.class_weights):
        if counts[i] == 0:
            continue  # class never observed: no numerator term
        mask = minput.labels[:, i] == 1.0
        numerator += w * np.log(clipped[mask, i]).sum() / counts[i]
    return float(-numerator / minput.class_weights.sum())


@dataclass
class FoldAssignment:
    k: int
    mapping: dict[str, int]  # patient_id -> fold index

    def fold_of(self, patient_id: str) -> int:
        return self.mapping[patient_id]

    def members(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.mapping.items() if f == fold)


def _patient_groups(samples: list[tuple[str, int]]) -> list[tuple[str, int, int]]:
    """(patient_id, majority class, slide count), ties in majority going to CE."""
    per_patient: dict[str, list[int]] = {}
    for patient_id, label in samples:
        if not patient_id:
            raise ValueError("patient_id must be non-empty")
        if label not in (CE, LAA):
            raise ValueError(f"label must be 0 (CE) or 1 (LAA), got {label}")
        per_patient.setdefault(patient_id, []).append(label)
    groups = []
    for patient_id, labels in per_patient.items():
        ce = labels.count(CE)
        majority = CE if ce >= len(labels) - ce else LAA
        groups.append((patient_id, majority, len(labels)))
    return groups


def stratified_group_kfold(samples: list[tuple[str, int]], k: int,
                           seed: int = 0) -> FoldAssignment:
    """Greedy class-balanced assignment of patient groups to k folds.

    Groups are ordered by (slide count desc, patient_id asc) and each goes to
    the fold minimizing the post-assignment deviation sum over classes and
    folds of |fold class count - fold target count|, ties to the lowest fold
    index. A deterministic repair pass fills any fold left empty. ``seed`` is
    reserved for an optional shuffle of equal-size groups and currently
    unused, so assignments are a pure function of the samples.
    """
    del seed
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    groups = _patient_groups(samples)
    if len(groups) < k:
        raise ValueError(f"need at least {k} patient groups, got {len(groups)}")

    totals = np.zeros(2)
    for _, cls_idx, count in groups:
        totals[cls_idx] += count
    target = totals / k

    fold_counts = np.zeros((k, 2))
    fold_sizes = np.zeros(k, dtype=int)
    mapping: dict[str, int] = {}
    for patient_id, cls_idx, count in sorted(groups, key=lambda g: (-g[2], g[0])):
        best_fold, best_dev = 0, np.inf
        for f in range(k):
            trial = fold_counts.copy()
            trial[f, cls_idx] += count
            dev = np.sum(np.abs(trial - target))
            if dev < best_dev - 1e-12:
                best_fold, best_dev = f, dev
        mapping[patient_id] = best_fold
        fold_counts[best_fold, cls_idx] += count
        fold_sizes[best_fold] += 1

    # Repair: greedy can leave folds empty on skewed group sizes; move the
    # group that minimizes post-move deviation from a multi-group fold.
    by_patient = {p: (c, n) for p, c, n in groups}
    while np.any(fold_sizes == 0):
        empty = int(np.argmin(fold_sizes))
        best = None
        for patient_id in sorted(mapping):
            donor = mapping[patient_id]
            if fold_sizes[donor] < 2:
                continue
            cls_idx, count = by_patient[patient_id]
            donor_after = fold_counts[donor].copy()
            donor_after[cls_idx] -= count
            empty_after = fold_counts[empty].copy()
            empty_after[cls_idx] += count
            dev = (np.sum(np.abs(donor_after - target))
                   + np.sum(np.abs(empty_after - target)))
            if best is None or dev < best[0] - 1e-12:
                best = (dev, patient_id)
        if best is None:
            raise ValueError("cannot fill empty fold: every fold has a single group")
        _, patient_id = best
        cls_idx, count = by_patient[patient_id]
        donor = mapping[patient_id]
        fold_counts[donor, cls_idx] -= count
        fold_sizes[donor] -= 1
        fold_counts[empty, cls_idx] += count
        fold_sizes[empty] += 1
        mapping[patient_id] = empty

    return FoldAssignment(k, mapping)


@dataclass
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_at_threshold(predictions: list[tuple[float, int]], t: float) -> ConfusionMatrix:
    """Tally with CE positive under the strict rule: predict CE iff p_CE > t."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {t}")
    tp = fp = tn = fn = 0
    for p_ce, label in predictions:
        predicted_ce = p_ce > t
        if label == CE:
            tp, fn = tp + predicted_ce, fn + (not predicted_ce)
        elif label == LAA:
            fp, tn = fp + predicted_ce, tn + (not predicted_ce)
        else:
            raise ValueError(f"label must be 0 (CE) or 1 (LAA), got {label}")
    return ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def weighted_prf(cm: ConfusionMatrix,
                 support: tuple[int, int]) -> tuple[float, float, float]:
    """Support-weighted (F1, precision, recall) with each class positive in turn."""
    if sum(support) <= 0:
        raise ValueError("total support must be positive")
    p_ce, r_ce, f_ce = _prf(cm.tp, cm.fp, cm.fn)
    p_laa, r_laa, f_laa = _prf(cm.tn, cm.fn, cm.fp)
    n_ce, n_laa = support
    total = n_ce + n_laa
    return (
        (n_ce * f_ce + n_laa * f_laa) / total,
        (n_ce * p_ce + n_laa * p_laa) / total,
        (n_ce * r_ce + n_laa * r_laa) / total,
    )


@dataclass
class SweepResult:
    thresholds: np.ndarray
    weighted_f1: np.ndarray
    weighted_precision: np.ndarray
    weighted_recall: np.ndarray
    best_threshold: float
    best_weighted_f1: float


def sweep_threshold(predictions: list[tuple[float, int]], step: float = 0.01) -> SweepResult:
    """Weighted PRF at every grid threshold; best = smallest F1 maximizer."""
    if not predictions:
        raise ValueError("predictions must be non-empty")
    n_ce = sum(1 for _, label in predictions if label == CE)
    support = (n_ce, len(predictions) - n_ce)
    n_steps = int(round(1.0 / step))
    thresholds = np.array([i / n_steps for i in range(n_steps + 1)])
    f1s, precisions, recalls = [], [], []
    for t in thresholds:
        f1, precision, recall = weighted_prf(confusion_at_threshold(predictions, t), support)
        f1s.append(f1)
        precisions.append(precision)
        recalls.append(recall)
    f1s = np.array(f1s)
    best_idx = int(np.argmax(f1s))  # argmax returns the first (smallest) maximizer
    return SweepResult(
        thresholds=thresholds,
        weighted_f1=f1s,
        weighted_precision=np.array(precisions),
        weighted_recall=np.array(recalls),
        best_threshold=float(thresholds[best_idx]),
        best_weighted_f1=float(f1s[best_idx]),
    )


def write_curve(sweep: SweepResult, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for t, f1, p, r in zip(sweep.thresholds, sweep.weighted_f1,
                               sweep.weighted_precision, sweep.weighted_recall):
            writer.writerow([f"{t:.2f}", f"{f1:.9f}", f"{p:.9f}", f"{r:.9f}"])


def write_confusion(cm: ConfusionMatrix, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CONFUSION_HEADER)
        writer.writerow([cm.tp, cm.fp, cm.fn, cm.tn])


def write_folds(assignment: FoldAssignment, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FOLDS_HEADER)
        for patient_id in sorted(assignment.mapping):
            writer.writerow([patient_id, assignment.mapping[patient_id]])


def read_folds(path: str) -> FoldAssignment:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != FOLDS_HEADER:
            raise ValueError(f"unexpected folds header {header} in {path}")
        mapping = {patient_id: int(fold) for patient_id, fold in reader}
    if not mapping:
        raise ValueError(f"no fold assignments in {path}")
    return FoldAssignment(max(mapping.values()) + 1, mapping)
