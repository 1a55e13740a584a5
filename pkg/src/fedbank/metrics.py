"""Evaluation metrics: confusion matrix, macro one-vs-rest AUC, macro
sensitivity/specificity/F1, accuracy, and prior-estimation error.

All multi-class metrics use macro (unweighted per-class mean) averaging,
which penalizes majority-class collapse, the failure mode this simulator
is built to study.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .bank import PriorSet
from .classifier import ModelParams, predict, predict_proba
from .data import Dataset
from .numerics import frobenius_distance


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. single-class AUC)."""


@dataclass
class MetricReport:
    auc: float
    accuracy: float
    specificity: float
    sensitivity: float
    f1: float
    support: np.ndarray  # per-class truth counts

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "specificity": self.specificity,
            "sensitivity": self.sensitivity,
            "f1": self.f1,
            "support": np.asarray(self.support).tolist(),
        }

    @staticmethod
    def metric_names() -> tuple[str, ...]:
        return ("auc", "accuracy", "specificity", "sensitivity", "f1")


def confusion_matrix(predictions, truth, num_classes: int) -> np.ndarray:
    """Counts with entry [i, j] = number of samples with truth i predicted j."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and truth must be equal-length 1-d arrays")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError("prediction out of range")
    if true.size and (true.min() < 0 or true.max() >= num_classes):
        raise ValueError("truth label out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties receiving the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def macro_auc(scores, truth) -> float:
    """Mean over classes of one-vs-rest ranking AUC.

    Rank-sum (Mann-Whitney) formulation with tie correction: tied scores
    contribute 1/2, so constant scores give exactly 0.5 per class. Classes
    absent from the truth are excluded with a warning.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth, dtype=np.int64)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise ValueError("scores must be (n, num_classes) aligned with truth")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    present = np.unique(y)
    if present.size < 2:
        raise UndefinedMetricError("AUC undefined with fewer than two classes present")
    if present.size < s.shape[1]:
        absent = sorted(set(range(s.shape[1])) - set(present.tolist()))
        warnings.warn(f"classes {absent} absent from truth; excluded from macro AUC")
    aucs = []
    for cls in present:
        pos = y == cls
        n_pos = int(pos.sum())
        n_neg = len(y) - n_pos
        ranks = _average_ranks(s[:, cls])
        rank_sum = float(ranks[pos].sum())
        aucs.append((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    return float(sum(aucs) / len(aucs))


def macro_rates(confusion) -> tuple[float, float, float]:
    """(sensitivity, specificity, f1), each macro-averaged one-vs-rest.

    Classes whose denominator is zero contribute 0 and trigger a warning.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    k = cm.shape[0]
    if cm.ndim != 2 or cm.shape != (k, k) or k < 2:
        raise ValueError("confusion matrix must be square with K >= 2")
    total = cm.sum()
    sens, spec, f1s = [], [], []
    flagged = []
    for cls in range(k):
        tp = cm[cls, cls]
        fn = cm[cls, :].sum() - tp
        fp = cm[:, cls].sum() - tp
        tn = total - tp - fn - fp
        if tp + fn > 0:
            sens.append(tp / (tp + fn))
        else:
            sens.append(0.0)
            flagged.append(cls)
        if tn + fp > 0:
            spec.append(tn / (tn + fp))
        else:
            spec.append(0.0)
            flagged.append(cls)
        if 2 * tp + fp + fn > 0:
            f1s.append(2 * tp / (2 * tp + fp + fn))
        else:
            f1s.append(0.0)
            flagged.append(cls)
    if flagged:
        warnings.warn(f"zero-denominator classes {sorted(set(flagged))} contribute 0")
    return (
        float(np.mean(sens)),
        float(np.mean(spec)),
        float(np.mean(f1s)),
    )


def prior_error(estimated: PriorSet, true_prior) -> float:
    """Frobenius distance between estimated and realized class priors."""
    true = np.asarray(true_prior, dtype=np.float64)
    est = estimated.class_priors
    if est.shape != true.shape:
        raise ValueError(f"prior length mismatch: {est.shape} vs {true.shape}")
    return frobenius_distance(est.reshape(1, -1), true.reshape(1, -1))


def evaluate_model(params: ModelParams, dataset: Dataset) -> MetricReport:
    """All five metrics of a classifier on a labeled dataset."""
    if dataset.labels is None:
        raise ValueError("evaluation needs a labeled dataset")
    scores = predict_proba(params, dataset.features)
    preds = predict(params, dataset.features)
    cm = confusion_matrix(preds, dataset.labels, dataset.num_classes)
    sensitivity, specificity, f1 = macro_rates(cm)
    return MetricReport(
        auc=macro_auc(scores, dataset.labels),
        accuracy=float(np.trace(cm) / cm.sum()),
        specificity=specificity,
        sensitivity=sensitivity,
        f1=f1,
        support=dataset.class_counts(),
    )
