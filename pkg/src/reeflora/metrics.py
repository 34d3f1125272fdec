"""Multi-label evaluation: match ratio, per-class and macro F1, micro F1.

Zero-denominator convention: a precision, recall or F1 whose denominator is
zero evaluates to 0. Scores are computed as exact rationals and rounded to
float once, so results do not depend on operation order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError
from .head import CLASS_NAMES

ZERO_DIVISION_POLICY = "zero"


def _as_batch(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds)
    t = np.asarray(truths)
    if p.ndim == 1:
        p = p[:, None]
    if t.ndim == 1:
        t = t[:, None]
    if p.shape != t.shape:
        raise ContractError(f"predictions {p.shape} and ground truth {t.shape} differ in shape")
    if p.shape[0] == 0:
        raise ContractError("metrics need at least one sample")
    return p.astype(bool), t.astype(bool)


def _ratio(num, den) -> Fraction:
    return Fraction(num) / den if den else Fraction(0)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    tn: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @property
    def num_samples(self) -> int:
        return self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge counts over different class sets")
        return ConfusionCounts(*(tuple(a + b for a, b in zip(x, y))
                                 for x, y in ((self.tp, other.tp), (self.fp, other.fp),
                                              (self.fn, other.fn), (self.tn, other.tn))))

    def to_dict(self) -> dict:
        return {"tp": list(self.tp), "fp": list(self.fp), "fn": list(self.fn), "tn": list(self.tn)}


def confusion_counts(preds, truths) -> ConfusionCounts:
    p, t = _as_batch(preds, truths)
    return ConfusionCounts(
        tp=tuple(int(v) for v in (p & t).sum(axis=0)),
        fp=tuple(int(v) for v in (p & ~t).sum(axis=0)),
        fn=tuple(int(v) for v in (~p & t).sum(axis=0)),
        tn=tuple(int(v) for v in (~p & ~t).sum(axis=0)),
    )


def match_ratio(preds, truths) -> float:
    """Fraction of samples whose whole predicted label vector equals the truth."""
    p, t = _as_batch(preds, truths)
    return float(Fraction(int((p == t).all(axis=1).sum()), p.shape[0]))


def _exact_per_class(counts: ConfusionCounts):
    out = []
    for tp, fp, fn in zip(counts.tp, counts.fp, counts.fn):
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        out.append((p, r, _ratio(2 * p * r, p + r)))
    return out


def per_class_scores(counts: ConfusionCounts) -> tuple[list[float], list[float], list[float]]:
    """Per-class (precision, recall, F1) lists."""
    rows = _exact_per_class(counts)
    return ([float(p) for p, _, _ in rows], [float(r) for _, r, _ in rows], [float(f) for _, _, f in rows])


def macro_f1(counts: ConfusionCounts) -> dict:
    f1 = [f for _, _, f in _exact_per_class(counts)]
    return {"per_class_f1": [float(f) for f in f1], "macro_f1": float(sum(f1) / len(f1))}


def micro_f1(counts: ConfusionCounts) -> dict:
    tp, fp, fn = sum(counts.tp), sum(counts.fp), sum(counts.fn)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return {"micro_precision": float(p), "micro_recall": float(r), "micro_f1": float(_ratio(2 * p * r, p + r))}


def _pct(x: float) -> float:
    return round(100.0 * x, 2)


@dataclass
class MetricsReport:
    match_ratio: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    counts: ConfusionCounts
    class_names: tuple[str, ...] = CLASS_NAMES

    @property
    def num_classes(self) -> int:
        return len(self.f1)

    def to_dict(self) -> dict:
        names = list(self.class_names)
        return {
            "schema": "reeflora.metrics/1",
            "num_samples": self.counts.num_samples,
            "num_classes": self.num_classes,
            "class_names": names,
            "zero_division": ZERO_DIVISION_POLICY,
            "match_ratio": self.match_ratio,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "per_class": {n: {"precision": p, "recall": r, "f1": f}
                          for n, p, r, f in zip(names, self.precision, self.recall, self.f1)},
            "counts": self.counts.to_dict(),
            # table layout: match ratio, micro F1, macro F1, then per-class F1, in percent
            "percent": {"match_ratio": _pct(self.match_ratio), "micro_f1": _pct(self.micro_f1),
                        "macro_f1": _pct(self.macro_f1),
                        "per_class_f1": {n: _pct(f) for n, f in zip(names, self.f1)}},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table_row(self) -> str:
        cells = [_pct(self.match_ratio), _pct(self.micro_f1), _pct(self.macro_f1)] + [_pct(f) for f in self.f1]
        return " | ".join(f"{c:.2f}" for c in cells)


def evaluate_predictions(preds, truths, class_names=None) -> MetricsReport:
    counts = confusion_counts(preds, truths)
    precision, recall, f1 = per_class_scores(counts)
    macro = macro_f1(counts)["macro_f1"]
    micro = micro_f1(counts)
    if class_names is None:
        class_names = CLASS_NAMES if counts.num_classes == len(CLASS_NAMES) else tuple(
            f"C{i}" for i in range(counts.num_classes))
    return MetricsReport(
        match_ratio=match_ratio(preds, truths),
        precision=precision, recall=recall, f1=f1,
        macro_f1=macro,
        micro_precision=micro["micro_precision"], micro_recall=micro["micro_recall"],
        micro_f1=micro["micro_f1"], counts=counts, class_names=tuple(class_names),
    )
