"""Classification metrics: confusion matrix, macro precision/recall/F1,
one-vs-rest ROC AUC, and Cohen's kappa.

All per-class rates are macro-averaged and 0/0 is defined as 0, counted in
a warning field so degenerate classes are visible in reports. The report
serialization uses the fixed key order LOSS, ACC, PREC, REC, F1, AUC,
KAPPA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .tensor import Array

REPORT_KEYS = ("LOSS", "ACC", "PREC", "REC", "F1", "AUC", "KAPPA")


def confusion_matrix(true_labels, predicted_labels, classes: int) -> Array:
    """K x K count matrix; rows index the true class, columns the prediction."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise DataError(f"label arrays disagree: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= classes):
            raise DataError(f"{name} labels must lie in [0,{classes}), got "
                            f"[{arr.min()},{arr.max()}]")
    matrix = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(matrix, (t, p), 1)
    return matrix


def classification_metrics(matrix: Array) -> tuple[float, float, float, float, int]:
    """(accuracy, macro precision, macro recall, macro F1, zero-div count).

    Per-class precision = diag/col, recall = diag/row, F1 = harmonic mean;
    any 0/0 is scored 0 and counted.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.sum()
    if n == 0:
        raise DataError("empty confusion matrix")
    diag = np.diag(matrix)
    col = matrix.sum(axis=0)
    row = matrix.sum(axis=1)
    warnings = 0
    prec = np.zeros(len(matrix))
    rec = np.zeros(len(matrix))
    f1 = np.zeros(len(matrix))
    for k in range(len(matrix)):
        if col[k] == 0:
            warnings += 1
        else:
            prec[k] = diag[k] / col[k]
        if row[k] == 0:
            warnings += 1
        else:
            rec[k] = diag[k] / row[k]
        if prec[k] + rec[k] == 0:
            warnings += 1
        else:
            f1[k] = 2 * prec[k] * rec[k] / (prec[k] + rec[k])
    acc = float(diag.sum() / n)
    return acc, float(prec.mean()), float(rec.mean()), float(f1.mean()), warnings


def _binary_auc(scores: Array, positives: Array) -> float:
    """Mann-Whitney AUC with ties counted one half, via average ranks."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = (i + j) / 2.0 + 1.0  # 1-based average rank of the tied block
        i = j + 1
    pos_ranks = ranks[positives[order]]
    n_pos = len(pos_ranks)
    n_neg = len(s) - n_pos
    return float((pos_ranks.sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_macro(scores: Array, true_labels) -> float:
    """Macro one-vs-rest ROC AUC over classes with both positives and
    negatives present; classes missing a side are skipped, and if every
    class is skipped the value is undefined."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise DataError(f"scores {scores.shape} do not match {len(labels)} labels")
    aucs = []
    for k in range(scores.shape[1]):
        positives = labels == k
        if positives.all() or not positives.any():
            continue
        aucs.append(_binary_auc(scores[:, k], positives))
    if not aucs:
        raise DataError("AUC undefined: every class lacks positives or negatives")
    return float(np.mean(aucs))


def cohen_kappa(matrix: Array) -> float:
    """Chance-corrected agreement (p_o - p_e)/(1 - p_e); 1.0 when both are 1."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.sum()
    if n < 1:
        raise DataError("cohen_kappa needs at least one sample")
    p_o = np.trace(matrix) / n
    p_e = float((matrix.sum(axis=1) * matrix.sum(axis=0)).sum()) / (n * n)
    if p_e == 1.0:
        return 1.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class EvalReport:
    """Evaluation summary mirroring the report columns LOSS..KAPPA."""

    confusion: Array
    loss: float
    acc: float
    prec: float
    rec: float
    f1: float
    auc: float
    kappa: float
    sample_count: int
    class_names: list[str] = field(default_factory=list)
    zero_division_warnings: int = 0

    def values(self) -> dict[str, float]:
        return {"LOSS": self.loss, "ACC": self.acc, "PREC": self.prec,
                "REC": self.rec, "F1": self.f1, "AUC": self.auc,
                "KAPPA": self.kappa}

    def to_text(self) -> str:
        lines = [f"samples {self.sample_count}",
                 "averaging macro (per-class rates, 0/0 scored as 0)",
                 f"zero_division_warnings {self.zero_division_warnings}"]
        vals = self.values()
        lines += [f"{key} {vals[key]:.6f}" for key in REPORT_KEYS]
        lines.append("confusion_matrix rows=true cols=predicted")
        names = self.class_names or [str(k) for k in range(len(self.confusion))]
        width = max(len(n) for n in names)
        for name, row in zip(names, self.confusion):
            lines.append(f"  {name:<{width}} " + " ".join(f"{int(v):6d}" for v in row))
        return "\n".join(lines) + "\n"


def evaluate_predictions(probs: Array, labels, loss: float,
                         class_names: list[str] | None = None) -> EvalReport:
    """Assemble an EvalReport from probability rows and true labels."""
    probs = np.asarray(probs)
    labels = np.asarray(labels, dtype=np.int64)
    classes = probs.shape[1]
    matrix = confusion_matrix(labels, probs.argmax(axis=1), classes)
    acc, prec, rec, f1, warnings = classification_metrics(matrix)
    auc = roc_auc_macro(probs, labels)
    kappa = cohen_kappa(matrix)
    return EvalReport(matrix, float(loss), acc, prec, rec, f1, auc, kappa,
                      int(matrix.sum()), class_names or [], warnings)
