"""Corpus ingestion: JSONL answer-candidate records, validation, and question grouping.

Each corpus line is one answer candidate for a legal question. Questions repeat
across consecutive lines (one line per candidate), so downstream stages group
records by a normalized question key. Line numbers are 0-based throughout,
matching the default record ids.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import PipelineError

SPLITS = ("train", "validation", "test")

# Splits whose records must carry gold labels.
LABELED_SPLITS = ("train", "validation")

MATCH_STRENGTHS = ("exact", "whitespace", "casefold", "full")

# Input field aliases seen in the wild for the same content.
_CANDIDATE_KEYS = ("answer", "candidate")
_EXPLANATION_KEYS = ("explanation", "introduction")
_ID_KEYS = ("idx", "id")
_RECOGNIZED_KEYS = frozenset(
    ("question", "label", "analysis") + _CANDIDATE_KEYS + _EXPLANATION_KEYS + _ID_KEYS
)


class CorpusError(PipelineError):
    """Base for corpus ingestion failures."""


class MalformedLine(CorpusError):
    def __init__(self, line_no: int, reason: str = ""):
        self.line_no = line_no
        msg = f"line {line_no}: not a valid JSON object"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)


class MissingField(CorpusError):
    def __init__(self, name: str, line_no: int):
        self.name = name
        self.line_no = line_no
        super().__init__(f"line {line_no}: missing or empty field {name!r}")


class BadLabel(CorpusError):
    def __init__(self, line_no: int, value: object = None):
        self.line_no = line_no
        self.value = value
        super().__init__(f"line {line_no}: label must be 0 or 1, got {value!r}")


@dataclass
class CandidateRecord:
    """One answer candidate for one question."""

    record_id: str
    question: str
    explanation: str
    candidate: str
    label: int | None
    analysis: str | None
    split: str
    extras: dict = field(default_factory=dict)


@dataclass
class QuestionGroup:
    """All candidates sharing one normalized question key, in file order."""

    key: str
    question: str
    explanation: str
    candidates: list[CandidateRecord]
    split: str

    def labels(self) -> list[int | None]:
        return [c.label for c in self.candidates]


def normalize_question(text: str, strength: str = "full") -> str:
    """Normalize a question into its matching key.

    Strength levels: "exact" strips outer whitespace only; "whitespace" also
    collapses internal runs; "casefold" adds case folding; "full" (default)
    adds NFKC Unicode normalization. The transform is run to a fixpoint so a
    normalized key re-normalizes to itself.
    """
    if strength not in MATCH_STRENGTHS:
        raise ValueError(f"unknown match strength {strength!r}")
    if strength == "exact":
        return text.strip()

    def step(s: str) -> str:
        if strength == "full":
            s = unicodedata.normalize("NFKC", s)
        if strength in ("casefold", "full"):
            s = s.casefold()
        return " ".join(s.split())

    prev, cur = None, text
    # casefold/NFKC interactions can need a second pass; cap defensively.
    for _ in range(8):
        if cur == prev:
            break
        prev, cur = cur, step(cur)
    return cur


def _parse_label(value: object, line_no: int) -> int:
    if isinstance(value, bool):
        raise BadLabel(line_no, value)
    if isinstance(value, int) and value in (0, 1):
        return value
    if isinstance(value, float) and value.is_integer() and int(value) in (0, 1):
        return int(value)
    if isinstance(value, str) and value.strip() in ("0", "1"):
        return int(value.strip())
    raise BadLabel(line_no, value)


def _text_field(raw: dict, keys: Iterable[str]) -> str | None:
    for key in keys:
        if key in raw and raw[key] is not None:
            return str(raw[key])
    return None


def load_split(path: str | Path, split: str) -> list[CandidateRecord]:
    """Load one JSONL split into records, in file order.

    record_id comes from an explicit "idx"/"id" field when present, else the
    0-based line number as text. Labels are required for train/validation and
    optional for test. Unknown fields are kept in record.extras.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    records: list[CandidateRecord] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, str(exc)) from exc
            if not isinstance(raw, dict):
                raise MalformedLine(line_no, f"expected an object, got {type(raw).__name__}")

            question = _text_field(raw, ("question",))
            if question is None or not question.strip():
                raise MissingField("question", line_no)
            candidate = _text_field(raw, _CANDIDATE_KEYS)
            if candidate is None or not candidate.strip():
                raise MissingField("candidate", line_no)

            if "label" in raw and raw["label"] is not None:
                label: int | None = _parse_label(raw["label"], line_no)
            elif split in LABELED_SPLITS:
                raise MissingField("label", line_no)
            else:
                label = None

            raw_id = _text_field(raw, _ID_KEYS)
            record_id = raw_id if raw_id is not None else str(line_no)
            if record_id in seen_ids:
                raise CorpusError(f"line {line_no}: duplicate record id {record_id!r}")
            seen_ids.add(record_id)

            explanation = _text_field(raw, _EXPLANATION_KEYS)
            analysis = _text_field(raw, ("analysis",))
            extras = {k: v for k, v in raw.items() if k not in _RECOGNIZED_KEYS}
            records.append(
                CandidateRecord(
                    record_id=record_id,
                    question=question,
                    explanation=explanation if explanation is not None else "",
                    candidate=candidate,
                    label=label,
                    analysis=analysis,
                    split=split,
                    extras=extras,
                )
            )
    return records


def write_split(records: Iterable[CandidateRecord], path: str | Path) -> None:
    """Serialize records back to JSONL with canonical field names."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row: dict = {
                "idx": r.record_id,
                "question": r.question,
                "explanation": r.explanation,
                "answer": r.candidate,
            }
            if r.label is not None:
                row["label"] = r.label
            if r.analysis is not None:
                row["analysis"] = r.analysis
            row.update(r.extras)
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def group_by_question(
    records: Iterable[CandidateRecord], strength: str = "full"
) -> list[QuestionGroup]:
    """Group records by normalized question key, ordered by first occurrence.

    The group's display question is the first occurrence's text; its
    explanation is the first non-empty one among members.
    """
    groups: dict[str, QuestionGroup] = {}
    splits_seen: set[str] = set()
    for record in records:
        splits_seen.add(record.split)
        if len(splits_seen) > 1:
            raise CorpusError(f"cannot group records from mixed splits: {sorted(splits_seen)}")
        key = normalize_question(record.question, strength)
        group = groups.get(key)
        if group is None:
            groups[key] = QuestionGroup(
                key=key,
                question=record.question,
                explanation=record.explanation,
                candidates=[record],
                split=record.split,
            )
        else:
            group.candidates.append(record)
            if not group.explanation.strip() and record.explanation.strip():
                group.explanation = record.explanation
    return list(groups.values())
