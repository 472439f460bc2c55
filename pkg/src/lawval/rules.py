"""Rule-based label correction from train/validation statistics.

Questions recur across splits. When every labeled candidate of a question in
train+validation is 0, the unseen test candidate for that question is presumed
correct; when any labeled candidate is 1, further test candidates are presumed
incorrect. The override is total: matched predictions are forced to the rule's
label regardless of what the model said.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

from .corpus import CandidateRecord, normalize_question
from .errors import PipelineError
from .taskform import PROV_RULE, BinaryPrediction


class MisalignedInputs(PipelineError):
    pass


@dataclass
class LabelStats:
    candidate_count: int = 0
    positive_count: int = 0


@dataclass
class LabelIndex:
    entries: dict[str, LabelStats] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def build_label_index(
    records: Iterable[CandidateRecord], strength: str = "full"
) -> LabelIndex:
    """Count candidates and positives per question key, labeled records only."""
    index = LabelIndex()
    for record in records:
        if record.label is None:
            continue
        key = normalize_question(record.question, strength)
        stats = index.entries.setdefault(key, LabelStats())
        stats.candidate_count += 1
        stats.positive_count += record.label
    return index


def apply_rules(
    preds: list[BinaryPrediction], index: LabelIndex
) -> list[BinaryPrediction]:
    """Force indexed predictions to the rule label; pass the rest through.

    A key whose train/val positives are zero forces label 1, any positive
    forces 0. Changed predictions get rule_adjusted provenance; order is
    preserved and the pass is idempotent.
    """
    out: list[BinaryPrediction] = []
    for pred in preds:
        stats = index.entries.get(pred.key)
        if stats is None:
            out.append(pred)
            continue
        target = 1 if stats.positive_count == 0 else 0
        if pred.predicted_label == target:
            out.append(pred)
        else:
            out.append(replace(pred, predicted_label=target, provenance=PROV_RULE))
    return out


@dataclass
class RuleReport:
    flips_0_to_1: int
    flips_1_to_0: int
    untouched: int
    adjustments: list[dict]

    def to_dict(self) -> dict:
        return {
            "flips_0_to_1": self.flips_0_to_1,
            "flips_1_to_0": self.flips_1_to_0,
            "untouched": self.untouched,
            "adjustments": self.adjustments,
        }


def rule_report(
    before: list[BinaryPrediction], after: list[BinaryPrediction]
) -> RuleReport:
    """Summarize what a rule pass changed, listed per question."""
    if len(before) != len(after):
        raise MisalignedInputs(f"{len(before)} predictions before vs {len(after)} after")
    up = down = untouched = 0
    adjustments: list[dict] = []
    for old, new in zip(before, after):
        if old.record_id != new.record_id:
            raise MisalignedInputs(
                f"record order diverged: {old.record_id!r} vs {new.record_id!r}"
            )
        if old.predicted_label == new.predicted_label:
            untouched += 1
            continue
        if new.predicted_label == 1:
            up += 1
        else:
            down += 1
        adjustments.append(
            {
                "key": new.key,
                "record_id": new.record_id,
                "before": old.predicted_label,
                "after": new.predicted_label,
            }
        )
    return RuleReport(
        flips_0_to_1=up, flips_1_to_0=down, untouched=untouched, adjustments=adjustments
    )
