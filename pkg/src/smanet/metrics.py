"""Classification metrics computed from a confusion matrix (rows = truth, cols = prediction)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion matrix has negative counts")
        if c.sum() < 1:
            raise ValueError("confusion matrix is empty")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_labels(cls, truth, pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth), np.asarray(pred)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def class_support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _recalls(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    support = cm.class_support
    present = support > 0
    recall = np.zeros(len(support))
    recall[present] = np.diag(cm.counts)[present] / support[present]
    return recall, present


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Unweighted mean recall over classes that occur in the truth."""
    recall, present = _recalls(cm)
    return float(recall[present].mean())


def one_vs_rest_specificity(cm: ConfusionMatrix) -> np.ndarray:
    n = cm.total
    tp = np.diag(cm.counts)
    fp = cm.predicted_totals - tp
    negatives = n - cm.class_support
    tn = negatives - fp
    with np.errstate(invalid="ignore", divide="ignore"):
        spec = np.where(negatives > 0, tn / np.maximum(negatives, 1), 0.0)
    return spec


def weighted_sen_spe(cm: ConfusionMatrix) -> tuple[float, float]:
    """Support-weighted sensitivity and one-vs-rest specificity."""
    weights = cm.class_support / cm.total
    recall, _ = _recalls(cm)
    return float(weights @ recall), float(weights @ one_vs_rest_specificity(cm))


def cohen_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement; 0 when chance agreement is already 1."""
    n = cm.total
    p_o = np.trace(cm.counts) / n
    p_e = float(cm.class_support @ cm.predicted_totals) / n ** 2
    if p_e >= 1.0:
        return 0.0
    return float((p_o - p_e) / (1 - p_e))


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(cm.counts).astype(np.float64)
    pred, true = cm.predicted_totals, cm.class_support
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def weighted_f1(cm: ConfusionMatrix) -> float:
    return float((cm.class_support / cm.total) @ per_class_f1(cm))


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: bool


def roc_auc(scores, labels=None) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counting one half.

    Takes parallel score/label arrays, or a single list of ScoredSample.
    """
    if labels is None:
        samples = list(scores)
        scores = [s.score for s in samples]
        labels = [s.label for s in samples]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC is undefined without both positive and negative samples")
    # average ranks handle ties exactly
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[labels].sum() - len(pos) * (len(pos) + 1) / 2
    return float(u / (len(pos) * len(neg)))


REPORT_KEYS = ("kappa", "f1", "b_acc", "sen", "spe", "auc_narrow_synechiae")


def evaluation_report(truth, pred, probs_final, num_classes: int) -> dict[str, float | None]:
    """Full metric suite. The narrow-vs-synechiae AUC is scored with the synechiae
    probability on samples whose truth is narrow or synechiae (three-class only)."""
    cm = ConfusionMatrix.from_labels(truth, pred, num_classes)
    sen, spe = weighted_sen_spe(cm)
    report = {
        "kappa": cohen_kappa(cm),
        "f1": weighted_f1(cm),
        "b_acc": balanced_accuracy(cm),
        "sen": sen,
        "spe": spe,
        "auc_narrow_synechiae": None,
    }
    truth = np.asarray(truth)
    if num_classes == 3:
        keep = (truth == 1) | (truth == 2)
        if (truth[keep] == 1).any() and (truth[keep] == 2).any():
            report["auc_narrow_synechiae"] = roc_auc(np.asarray(probs_final)[keep, 2], truth[keep] == 2)
    return report


def format_report(report: dict, extra: dict | None = None) -> str:
    lines = [f"{k}={v}" for k, v in (extra or {}).items()]
    for key in REPORT_KEYS:
        value = report.get(key)
        lines.append(f"{key}={'nan' if value is None else format(value, '.6f')}")
    return "\n".join(lines) + "\n"
