"""Shared builders for the synthetic corpora used across the test suite."""

from __future__ import annotations

import json
from pathlib import Path

from lawval.corpus import CandidateRecord, QuestionGroup, group_by_question


def row(
    question: str,
    answer: str,
    label: int | None = None,
    explanation: str = "",
    analysis: str | None = None,
    idx: str | None = None,
    **extras,
) -> dict:
    out: dict = {"question": question, "answer": answer, "explanation": explanation}
    if label is not None:
        out["label"] = label
    if analysis is not None:
        out["analysis"] = analysis
    if idx is not None:
        out["idx"] = idx
    out.update(extras)
    return out


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows), encoding="utf-8")
    return path


def question_rows(
    tag: str,
    labels: list[int | None],
    *,
    analysis: bool = True,
    explanation: str | None = None,
) -> list[dict]:
    """All candidate rows for one question, labels in candidate order."""
    question = f"Does procedural rule {tag} bar recovery on these facts?"
    context = (
        explanation
        if explanation is not None
        else f"The parties dispute how rule {tag} applies to the stipulated record."
    )
    rows = []
    for j, label in enumerate(labels):
        rows.append(
            row(
                question,
                f"Ground {j} defeats the claim under rule {tag}.",
                label=label,
                explanation=context,
                analysis=f"Ground {j} is dispositive for rule {tag}." if analysis else None,
            )
        )
    return rows


def split_rows(
    prefix: str,
    singles: int,
    allzeros: int,
    *,
    n_choices: int = 3,
    labeled: bool = True,
) -> list[dict]:
    """Rows for a split: `singles` one-correct questions then `allzeros` questions."""
    rows = []
    for i in range(singles + allzeros):
        labels: list[int | None]
        if i < singles:
            labels = [1 if j == i % n_choices else 0 for j in range(n_choices)]
        else:
            labels = [0] * n_choices
        if not labeled:
            labels = [None] * n_choices
        rows.extend(question_rows(f"{prefix}{i}", labels))
    return rows


def pipeline_files(
    tmp_path: Path,
    *,
    train=(5, 3),
    validation=(2, 1),
    test=(4, 2),
    labeled_test: bool = True,
) -> dict[str, str]:
    """Write train/validation/test JSONL files with disjoint question tags."""
    paths = {}
    for split, (singles, allzeros) in (("train", train), ("validation", validation), ("test", test)):
        labeled = True if split != "test" else labeled_test
        path = write_jsonl(
            tmp_path / f"{split}.jsonl",
            split_rows(f"{split[:2]}-", singles, allzeros, labeled=labeled),
        )
        paths[split] = str(path)
    return paths


def make_records(
    labels: list[int | None],
    *,
    tag: str = "q0",
    split: str = "train",
    explanation: str = "Some context about the dispute.",
    analysis: bool = True,
    start_id: int = 0,
) -> list[CandidateRecord]:
    question = f"Does rule {tag} control the outcome?"
    return [
        CandidateRecord(
            record_id=str(start_id + j),
            question=question,
            explanation=explanation,
            candidate=f"Candidate {tag}.{j} prevails on the facts.",
            label=label,
            analysis=f"Analysis {tag}.{j}." if analysis else None,
            split=split,
        )
        for j, label in enumerate(labels)
    ]


def make_group(labels: list[int | None], **kwargs) -> QuestionGroup:
    groups = group_by_question(make_records(labels, **kwargs))
    assert len(groups) == 1
    return groups[0]
