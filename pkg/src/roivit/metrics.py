"""Confusion-matrix accounting and macro-averaged classification metrics.

Rows index the actual class, columns the predicted class. For class c the
one-vs-rest decomposition is: TP the diagonal cell, FP the rest of column
c, FN the rest of row c, TN everything else. Per-class precision, recall,
F1 and one-vs-rest accuracy derive from those counts; macro values are
their unweighted means. Any metric whose denominator is zero is defined
as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise UsageError(
                    f"counts shape {self.counts.shape} != ({self.num_classes}, {self.num_classes})"
                )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, actual: int, predicted: int) -> "ConfusionMatrix":
        k = self.num_classes
        if not (0 <= actual < k and 0 <= predicted < k):
            raise UsageError(f"class pair ({actual}, {predicted}) outside [0, {k})")
        self.counts[actual, predicted] += 1
        return self


@dataclass
class MetricReport:
    overall_accuracy: float
    macro_ovr_accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    per_class_f1: list[float]

    def as_key_values(self) -> list[tuple[str, float]]:
        pairs = [
            ("overall_accuracy", self.overall_accuracy),
            ("macro_ovr_accuracy", self.macro_ovr_accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
        ]
        for c, (p, r, f1) in enumerate(
            zip(self.per_class_precision, self.per_class_recall, self.per_class_f1)
        ):
            pairs += [(f"class{c}_precision", p), (f"class{c}_recall", r), (f"class{c}_f1", f1)]
        return pairs

    def to_kv_text(self) -> str:
        return "".join(f"{k} = {v:.10f}\n" for k, v in self.as_key_values())

    def to_table(self, class_names: list[str] | None = None) -> str:
        k = len(self.per_class_precision)
        names = class_names if class_names is not None else [f"class{c}" for c in range(k)]
        width = max(5, max(len(n) for n in names))
        lines = [f"{'class':<{width}}  precision  recall  f1"]
        for c in range(k):
            lines.append(
                f"{names[c]:<{width}}  {self.per_class_precision[c]:9.4f}  "
                f"{self.per_class_recall[c]:6.4f}  {self.per_class_f1[c]:6.4f}"
            )
        lines.append(
            f"macro{'':<{width - 5}}  {self.macro_precision:9.4f}  "
            f"{self.macro_recall:6.4f}  {self.macro_f1:6.4f}"
        )
        lines.append(f"overall accuracy      {self.overall_accuracy:.4f}")
        lines.append(f"macro 1-vs-rest acc   {self.macro_ovr_accuracy:.4f}")
        return "\n".join(lines) + "\n"


def _safe_div(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def report(cm: ConfusionMatrix) -> MetricReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise UsageError("cannot report on an empty confusion matrix")
    tp = np.diagonal(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    tn = total - tp - fp - fn

    precision = [_safe_div(tp[c], tp[c] + fp[c]) for c in range(cm.num_classes)]
    recall = [_safe_div(tp[c], tp[c] + fn[c]) for c in range(cm.num_classes)]
    f1 = [_safe_div(2 * p * r, p + r) for p, r in zip(precision, recall)]
    ovr_acc = [(tp[c] + tn[c]) / total for c in range(cm.num_classes)]

    return MetricReport(
        overall_accuracy=float(np.trace(counts) / total),
        macro_ovr_accuracy=float(np.mean(ovr_acc)),
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        per_class_precision=[float(v) for v in precision],
        per_class_recall=[float(v) for v in recall],
        per_class_f1=[float(v) for v in f1],
    )
