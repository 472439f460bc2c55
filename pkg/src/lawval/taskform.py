"""Task reformulation between binary candidate classification and multi-choice QA.

A question group becomes one multi-choice item whose choices are the candidate
texts in corpus order plus a final "None of the Above" option, so questions
where every candidate is wrong still have a selectable answer. Choice
predictions map back to per-candidate 0/1 labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .corpus import CandidateRecord, QuestionGroup
from .errors import PipelineError

NONE_OF_THE_ABOVE = "None of the Above"

# Where a prediction's label came from.
PROV_MODEL = "model"
PROV_RULE = "rule_adjusted"
PROV_FALLBACK = "parse_fallback"
PROVENANCES = (PROV_MODEL, PROV_RULE, PROV_FALLBACK)


class MultipleCorrect(PipelineError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"question {key!r} has more than one candidate labeled 1")


class IndexOutOfRange(PipelineError):
    def __init__(self, index: int, n_choices: int):
        self.index = index
        super().__init__(f"chosen index {index} outside choice range 0..{n_choices - 1}")


@dataclass
class MultiChoiceItem:
    key: str
    question: str
    context: str
    choices: list[str]
    nota_index: int
    gold_index: int | None
    source_record_ids: list[str]


@dataclass
class ChoicePrediction:
    key: str
    chosen_index: int
    reasoning: str | None
    run_id: int


@dataclass
class BinaryPrediction:
    record_id: str
    key: str
    predicted_label: int
    provenance: str


def _augmented_context(base: str, notes: list[str]) -> str:
    parts = [base] if base.strip() else []
    parts.extend(n for n in notes if n and n.strip())
    return "\n\n".join(parts)


def to_multi_choice(group: QuestionGroup, include_analysis: bool = False) -> MultiChoiceItem:
    """Convert one question group into a multi-choice item.

    The gold index points at the single label-1 candidate, or at the
    "None of the Above" slot when every label is 0, and is absent when any
    candidate is unlabeled. include_analysis appends candidate analyses to the
    context (leaks label hints; off by default).
    """
    if not group.candidates:
        raise ValueError(f"question {group.key!r} has no candidates")
    labels = group.labels()
    positives = [i for i, lab in enumerate(labels) if lab == 1]
    if len(positives) > 1:
        raise MultipleCorrect(group.key)

    nota_index = len(group.candidates)
    if any(lab is None for lab in labels):
        gold_index: int | None = None
    elif positives:
        gold_index = positives[0]
    else:
        gold_index = nota_index

    context = group.explanation
    if include_analysis:
        context = _augmented_context(context, [c.analysis or "" for c in group.candidates])

    return MultiChoiceItem(
        key=group.key,
        question=group.question,
        context=context,
        choices=[c.candidate for c in group.candidates] + [NONE_OF_THE_ABOVE],
        nota_index=nota_index,
        gold_index=gold_index,
        source_record_ids=[c.record_id for c in group.candidates],
    )


def from_choice(
    item: MultiChoiceItem, pred: ChoicePrediction, provenance: str = PROV_MODEL
) -> list[BinaryPrediction]:
    """Map a choice prediction back to one 0/1 label per source record.

    Choosing "None of the Above" yields all zeros; any real choice yields
    exactly one 1 at the chosen candidate.
    """
    if not 0 <= pred.chosen_index < len(item.choices):
        raise IndexOutOfRange(pred.chosen_index, len(item.choices))
    return [
        BinaryPrediction(
            record_id=rid,
            key=item.key,
            predicted_label=1 if i == pred.chosen_index else 0,
            provenance=provenance,
        )
        for i, rid in enumerate(item.source_record_ids)
    ]


def render_binary_block(record: CandidateRecord) -> str:
    return (
        f"Question:\n{record.question}\n\n"
        f"Context:\n{record.explanation}\n\n"
        f"Choice:\n{record.candidate}"
    )


def binary_query_text(record: CandidateRecord, include_analysis: bool = False) -> str:
    """Rendered binary block, optionally with the record's analysis in the context."""
    if include_analysis and record.analysis and record.analysis.strip():
        record = replace(record, explanation=_augmented_context(record.explanation, [record.analysis]))
    return render_binary_block(record)


def render_mc_block(item: MultiChoiceItem) -> str:
    entries = ", \n".join(f"{i}: {text}" for i, text in enumerate(item.choices))
    return (
        f"Question:\n{item.question}\n\n"
        f"Context:\n{item.context}\n\n"
        f"Choices:\n{{{entries}}}"
    )


def parse_query_sections(text: str) -> dict:
    """Split a rendered query block back into its sections.

    Mock-backend plumbing: relies on the fixed section layout, so a question
    containing a literal section marker would confuse it.
    """
    out: dict = {}
    body = text
    if body.startswith("Question:\n"):
        body = body[len("Question:\n"):]
    question, sep, rest = body.partition("\n\nContext:\n")
    out["question"] = question
    if not sep:
        return out
    for marker, name in (("\n\nChoices:\n", "choices"), ("\n\nChoice:\n", "choice")):
        context, sep2, tail = rest.partition(marker)
        if sep2:
            out["context"] = context
            out[name] = tail
            return out
    out["context"] = rest
    return out


def write_items(items: Iterable[MultiChoiceItem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {
                        "key": item.key,
                        "question": item.question,
                        "context": item.context,
                        "choices": item.choices,
                        "nota_index": item.nota_index,
                        "gold_index": item.gold_index,
                        "source_record_ids": item.source_record_ids,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_items(path: str | Path) -> list[MultiChoiceItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            items.append(
                MultiChoiceItem(
                    key=raw["key"],
                    question=raw["question"],
                    context=raw["context"],
                    choices=list(raw["choices"]),
                    nota_index=int(raw["nota_index"]),
                    gold_index=None if raw["gold_index"] is None else int(raw["gold_index"]),
                    source_record_ids=[str(r) for r in raw["source_record_ids"]],
                )
            )
    return items


def write_predictions(preds: Iterable[BinaryPrediction], path: str | Path) -> None:
    # Prediction files never carry gold labels, only the predicted ones.
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(
                json.dumps(
                    {
                        "record_id": p.record_id,
                        "key": p.key,
                        "predicted_label": p.predicted_label,
                        "provenance": p.provenance,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_predictions(path: str | Path) -> list[BinaryPrediction]:
    preds = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            preds.append(
                BinaryPrediction(
                    record_id=str(raw["record_id"]),
                    key=raw["key"],
                    predicted_label=int(raw["predicted_label"]),
                    provenance=raw["provenance"],
                )
            )
    return preds
