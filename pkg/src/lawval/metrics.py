"""Confusion counting, F1/accuracy scoring, and report rendering.

Percent values are rounded half-up to two decimals. Class F1 with a zero
denominator scores 0 rather than raising, so degenerate prediction sets still
render.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable

from .corpus import CandidateRecord
from .errors import PipelineError
from .taskform import BinaryPrediction


class UnlabeledGold(PipelineError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"gold record {record_id!r} has no label; cannot score it")


class EmptyScoreSet(PipelineError):
    pass


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    accuracy_pct: float
    f1_positive_pct: float
    macro_f1_pct: float
    counts: ConfusionCounts
    n_scored: int
    n_skipped: int


def confusion(
    preds: Iterable[BinaryPrediction], gold: Iterable[CandidateRecord]
) -> tuple[ConfusionCounts, int]:
    """Count the confusion matrix over record_id-matched pairs.

    Returns (counts, n_skipped) where n_skipped covers predictions without a
    gold record plus gold records never predicted; nothing is silently
    dropped. A matched gold record without a label raises UnlabeledGold.
    """
    gold_by_id = {r.record_id: r for r in gold}
    counts = ConfusionCounts()
    skipped = 0
    matched: set[str] = set()
    for pred in preds:
        record = gold_by_id.get(pred.record_id)
        if record is None:
            skipped += 1
            continue
        matched.add(pred.record_id)
        if record.label is None:
            raise UnlabeledGold(pred.record_id)
        if record.label == 1:
            if pred.predicted_label == 1:
                counts.tp += 1
            else:
                counts.fn += 1
        else:
            if pred.predicted_label == 1:
                counts.fp += 1
            else:
                counts.tn += 1
    skipped += sum(1 for rid in gold_by_id if rid not in matched)
    return counts, skipped


def score_fractions(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Unrounded (accuracy, positive F1, macro F1) in [0, 1]."""
    n = counts.total
    if n == 0:
        raise EmptyScoreSet("no scored pairs")
    accuracy = (counts.tp + counts.tn) / n
    pos_denom = 2 * counts.tp + counts.fp + counts.fn
    f1_positive = 2 * counts.tp / pos_denom if pos_denom else 0.0
    neg_denom = 2 * counts.tn + counts.fn + counts.fp
    f1_negative = 2 * counts.tn / neg_denom if neg_denom else 0.0
    return accuracy, f1_positive, (f1_positive + f1_negative) / 2


def round_pct(fraction: float) -> float:
    """fraction -> percent, rounded half-up to two decimals."""
    value = Decimal(repr(fraction)) * 100
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def score(counts: ConfusionCounts, n_skipped: int = 0) -> MetricsReport:
    accuracy, f1_positive, macro_f1 = score_fractions(counts)
    return MetricsReport(
        accuracy_pct=round_pct(accuracy),
        f1_positive_pct=round_pct(f1_positive),
        macro_f1_pct=round_pct(macro_f1),
        counts=counts,
        n_scored=counts.total,
        n_skipped=n_skipped,
    )


def render_report(report: MetricsReport, run_metadata: dict | None = None) -> tuple[str, dict]:
    """Render the results table plus the machine-readable report document.

    The table is pipe-delimited with the headline F1 first, then accuracy:
    "GPT-4 | 71.70 | 80.61".
    """
    meta = dict(run_metadata or {})
    model = meta.get("model", "model")
    variant = meta.get("f1_variant", "positive")
    if variant not in ("positive", "macro"):
        raise ValueError(f"unknown F1 variant {variant!r}")
    headline_f1 = report.f1_positive_pct if variant == "positive" else report.macro_f1_pct
    table = (
        "Model | F1 Score | Accuracy\n"
        f"{model} | {headline_f1:.2f} | {report.accuracy_pct:.2f}\n"
    )
    doc = {
        "model": model,
        "mode": meta.get("mode", ""),
        "accuracy_pct": report.accuracy_pct,
        "f1_positive_pct": report.f1_positive_pct,
        "macro_f1_pct": report.macro_f1_pct,
        "headline_f1_variant": variant,
        "headline_f1_pct": headline_f1,
        "counts": {
            "tp": report.counts.tp,
            "fp": report.counts.fp,
            "fn": report.counts.fn,
            "tn": report.counts.tn,
        },
        "n_scored": report.n_scored,
        "n_skipped": report.n_skipped,
        "provenance": meta.get("provenance", {}),
        "config_digest": meta.get("config_digest", ""),
    }
    return table, doc
