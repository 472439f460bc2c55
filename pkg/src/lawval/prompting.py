"""Few-shot prompt assembly: system instructions, shot selection, token budgeting.

Every prompt is a fixed system instruction, two worked examples rendered as
alternating user/assistant turns, and the query block. Token counts are
estimated at four characters per token; over-budget prompts shed context text
from the end, never the question or the choices.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .corpus import QuestionGroup
from .errors import PipelineError
from .taskform import binary_query_text, render_mc_block, to_multi_choice

MODES = ("binary", "multi_choice")

MULTI_CHOICE_SYSTEM_INSTRUCTION = (
    "You are an AI legal expert with expertise in U.S. Civil Procedure and U.S. Civil Law, "
    "known for your strong reasoning abilities. Your task is to answer a Multiple Choice "
    "Question in the legal domain. Choose an answer only if you are very confident, "
    'otherwise, select "None of The Above."\n'
    "\n"
    "You will be provided with:\n"
    "1. question: A legal question\n"
    "2. context: Additional context for better understanding\n"
    "3. choices: Multiple answer candidates\n"
    "\n"
    'Your response should be a JSON with two keys: "correct_answer" and "reasoning." '
    'Place the correct answer exactly as provided in the "correct_answer" key. Provide a '
    'detailed explanation of your reasoning in the "reasoning" key. Do not add or remove '
    "any other text.\n"
    "\n"
    "Your goal is to ensure accurate answers and thorough reasoning."
)

BINARY_SYSTEM_INSTRUCTION = (
    "You are an AI legal expert with expertise in U.S. Civil Procedure and U.S. Civil Law, "
    "known for your strong reasoning abilities. Your task is to answer a question in the "
    "legal domain.\n"
    "\n"
    "You will be provided with:\n"
    "\n"
    "1. question: A legal question\n"
    "2. context: Additional context for better understanding\n"
    "3. answer candidate: an answer candidate that can be either correct or incorrect\n"
    "\n"
    "Your response should be a string with length 1. You will be classifying a correct "
    "answer as 1, and an incorrect answer as 0.\n"
    "\n"
    "Your goal is to ensure accurate answers and thorough reasoning."
)

DEFAULT_SHOT_REASONING = "See analysis."
TRUNCATION_MARKER = "[truncated]"

_CONTEXT_MARKER = "\n\nContext:\n"


class InsufficientShots(PipelineError):
    def __init__(self, kind: str):
        self.kind = kind
        super().__init__(f"no training question qualifies for a {kind!r} shot")


class BudgetUnsatisfiable(PipelineError):
    pass


@dataclass
class PromptBundle:
    system_instruction: str
    shots: list[tuple[str, str]]
    query: str
    mode: str
    estimated_tokens: int


def system_instruction_for(mode: str) -> str:
    if mode == "multi_choice":
        return MULTI_CHOICE_SYSTEM_INSTRUCTION
    if mode == "binary":
        return BINARY_SYSTEM_INSTRUCTION
    raise ValueError(f"unknown mode {mode!r}")


def load_system_instruction(path: str | Path) -> str:
    """Read a replacement system instruction from a text file."""
    return Path(path).read_text(encoding="utf-8")


def _pick(groups: list[QuestionGroup], rng: random.Random, kind: str) -> QuestionGroup:
    if not groups:
        raise InsufficientShots(kind)
    return groups[rng.randrange(len(groups))]


def _shot_reasoning(group: QuestionGroup, gold_index: int | None) -> str:
    if gold_index is not None and gold_index < len(group.candidates):
        analysis = group.candidates[gold_index].analysis
        if analysis and analysis.strip():
            return analysis
    for candidate in group.candidates:
        if candidate.analysis and candidate.analysis.strip():
            return candidate.analysis
    return DEFAULT_SHOT_REASONING


def _mc_shot(group: QuestionGroup, include_analysis: bool) -> tuple[str, str]:
    item = to_multi_choice(group, include_analysis=include_analysis)
    gold = item.gold_index
    assert gold is not None  # qualifying pools are fully labeled
    real_gold = gold if gold != item.nota_index else None
    answer = json.dumps(
        {
            "correct_answer": item.choices[gold],
            "reasoning": _shot_reasoning(group, real_gold),
        },
        ensure_ascii=False,
    )
    return render_mc_block(item), answer


def _binary_shot(
    group: QuestionGroup, wanted_label: int, include_analysis: bool
) -> tuple[str, str]:
    record = next(c for c in group.candidates if c.label == wanted_label)
    return binary_query_text(record, include_analysis=include_analysis), str(wanted_label)


def select_shots(
    train_groups: list[QuestionGroup],
    mode: str,
    seed: int,
    include_analysis: bool = False,
) -> list[tuple[str, str]]:
    """Pick the two worked examples for a mode, deterministically from seed.

    Binary mode takes one candidate expected to be answered "1" and one "0".
    Multi-choice mode takes one question whose gold is a real choice and one
    whose gold is "None of the Above". Draws are uniform over the qualifying
    groups.
    """
    rng = random.Random(seed)
    if mode == "binary":
        positive_pool = [g for g in train_groups if any(c.label == 1 for c in g.candidates)]
        negative_pool = [g for g in train_groups if any(c.label == 0 for c in g.candidates)]
        return [
            _binary_shot(_pick(positive_pool, rng, "correct"), 1, include_analysis),
            _binary_shot(_pick(negative_pool, rng, "incorrect"), 0, include_analysis),
        ]
    if mode == "multi_choice":
        labeled = [g for g in train_groups if all(lab is not None for lab in g.labels())]
        choice_pool = [g for g in labeled if sum(g.labels()) == 1]
        nota_pool = [g for g in labeled if sum(g.labels()) == 0]
        return [
            _mc_shot(_pick(choice_pool, rng, "choice"), include_analysis),
            _mc_shot(_pick(nota_pool, rng, "nota"), include_analysis),
        ]
    raise ValueError(f"unknown mode {mode!r}")


def _bundle_chars(system: str, shots: list[tuple[str, str]], query: str) -> int:
    return len(system) + sum(len(q) + len(a) for q, a in shots) + len(query)


def _estimate_tokens(system: str, shots: list[tuple[str, str]], query: str) -> int:
    chars = _bundle_chars(system, shots, query)
    return (chars + 3) // 4


def build_prompt(
    query: str,
    shots: list[tuple[str, str]],
    mode: str,
    system_instruction: str | None = None,
) -> PromptBundle:
    system = system_instruction if system_instruction is not None else system_instruction_for(mode)
    return PromptBundle(
        system_instruction=system,
        shots=list(shots),
        query=query,
        mode=mode,
        estimated_tokens=_estimate_tokens(system, shots, query),
    )


def _split_context(query: str, mode: str) -> tuple[str, str | None, str]:
    """Return (head, context, tail-with-marker); context is None when absent."""
    head, sep, rest = query.partition(_CONTEXT_MARKER)
    if not sep:
        return query, None, ""
    choice_marker = "\n\nChoices:\n" if mode == "multi_choice" else "\n\nChoice:\n"
    context, sep2, tail = rest.partition(choice_marker)
    if not sep2:
        return head, rest, ""
    return head, context, choice_marker + tail


def fit_to_budget(bundle: PromptBundle, max_tokens: int) -> PromptBundle:
    """Shrink the query context until the bundle fits max_tokens.

    Only the Context section is cut, from its end, and a cut context is
    terminated with the truncation marker. The question and the choice
    section survive verbatim. Raises BudgetUnsatisfiable when even an empty
    context cannot fit.
    """
    if max_tokens <= 0:
        raise ValueError("max_tokens must be positive")
    budget_chars = max_tokens * 4
    total = _bundle_chars(bundle.system_instruction, bundle.shots, bundle.query)
    if total <= budget_chars:
        return bundle

    head, context, tail = _split_context(bundle.query, bundle.mode)
    context_len = len(context) if context is not None else 0
    overhead = total - context_len
    if overhead > budget_chars or context is None:
        raise BudgetUnsatisfiable(
            f"prompt needs {overhead} characters before any context; budget is {budget_chars}"
        )
    keep = budget_chars - overhead - len(TRUNCATION_MARKER)
    new_context = context[:keep] + TRUNCATION_MARKER if keep >= 0 else ""
    new_query = head + _CONTEXT_MARKER + new_context + tail
    return replace(
        bundle,
        query=new_query,
        estimated_tokens=_estimate_tokens(bundle.system_instruction, bundle.shots, new_query),
    )


def bundle_messages(bundle: PromptBundle) -> list[dict]:
    """Flatten a bundle into chat messages: system, shot turns, then the query."""
    messages = [{"role": "system", "content": bundle.system_instruction}]
    for shot_query, shot_answer in bundle.shots:
        messages.append({"role": "user", "content": shot_query})
        messages.append({"role": "assistant", "content": shot_answer})
    messages.append({"role": "user", "content": bundle.query})
    return messages


def format_transcript(bundle: PromptBundle, label: str = "") -> str:
    """Human-readable dump of one bundle for auditing."""
    lines = [f"=== prompt {label} (mode={bundle.mode}, ~{bundle.estimated_tokens} tokens) ==="]
    for message in bundle_messages(bundle):
        lines.append(f"--- {message['role']} ---")
        lines.append(message["content"])
    lines.append("")
    return "\n".join(lines)
