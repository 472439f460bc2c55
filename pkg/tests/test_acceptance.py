"""Acceptance suite: one test per shipped guarantee, one pass line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the pass lines.
Each test exercises a complete behavior end to end, with independent
brute-force restatements as oracles where the behavior is computational.
"""

from __future__ import annotations

import json
import random
import time

import pytest

from helpers import make_group, make_records, pipeline_files, question_rows, row, split_rows, write_jsonl
from lawval.cli import main
from lawval.corpus import load_split, normalize_question
from lawval.metrics import ConfusionCounts, MetricsReport, render_report, score, score_fractions
from lawval.prompting import (
    BINARY_SYSTEM_INSTRUCTION,
    MULTI_CHOICE_SYSTEM_INSTRUCTION,
    build_prompt,
    fit_to_budget,
    format_transcript,
    select_shots,
)
from lawval.provider import (
    PARSE_OK,
    PARSE_RECOVERED,
    Unparseable,
    extract_answer_object,
    parse_mc_response,
    resolve_binary,
    resolve_choice,
)
from lawval.rules import apply_rules, build_label_index
from lawval.taskform import (
    NONE_OF_THE_ABOVE,
    BinaryPrediction,
    ChoicePrediction,
    binary_query_text,
    from_choice,
    render_mc_block,
    to_multi_choice,
)


# 1. Reformulation round trip: converting grouped candidates to a multi-choice
#    item and mapping the gold choice back reproduces every original label.


def test_acceptance_round_trip_reformulation() -> None:
    rng = random.Random(2024)
    trials = 250
    started = time.perf_counter()
    for i in range(trials):
        n = rng.randint(1, 6)
        if rng.random() < 0.5:
            labels = [0] * n
        else:
            labels = [0] * n
            labels[rng.randrange(n)] = 1
        group = make_group(labels, tag=f"rt{i}", start_id=i * 10)
        item = to_multi_choice(group)
        assert item.choices[-1] == NONE_OF_THE_ABOVE
        assert item.gold_index is not None
        back = from_choice(
            item,
            ChoicePrediction(key=item.key, chosen_index=item.gold_index, reasoning=None, run_id=0),
        )
        assert [p.predicted_label for p in back] == labels
        assert [p.record_id for p in back] == [c.record_id for c in group.candidates]
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"round trips took {elapsed:.3f}s"
    print(
        f"ACCEPTANCE PASS: reformulation round trip "
        f"({trials}/{trials} label vectors reproduced in {elapsed * 1000:.0f}ms)"
    )


# 2. Oracle pipeline: a backend that always answers with the gold choice must
#    score a perfect report through the real CLI, no rules involved.


def test_acceptance_oracle_pipeline(tmp_path) -> None:
    train = write_jsonl(tmp_path / "train.jsonl", split_rows("tr-", 5, 3))
    test = write_jsonl(tmp_path / "test.jsonl", split_rows("ac-", 40, 10))
    out = tmp_path / "out"
    rc = main(
        ["run", "--train", str(train), "--test", str(test), "--backend", "mock_oracle",
         "--runs", "1", "--no-rules", "--out", str(out)]
    )
    assert rc == 0
    doc = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert doc["accuracy_pct"] == 100.0
    assert doc["f1_positive_pct"] == 100.0
    assert doc["n_scored"] == 150
    assert doc["n_skipped"] == 0
    records = load_split(str(test), "test")
    submission = (out / "submission.txt").read_text(encoding="utf-8")
    assert submission == "".join(f"{r.label}\n" for r in records)
    print(
        "ACCEPTANCE PASS: oracle pipeline "
        f"(50 questions, accuracy {doc['accuracy_pct']}, F1 {doc['f1_positive_pct']})"
    )


# 3. Metrics agree with a definitional brute-force scorer on randomized
#    prediction sets, before any rounding.


def _definitional_scores(pairs: list[tuple[int, int]]) -> tuple[float, float, float]:
    accuracy = sum(1 for g, p in pairs if g == p) / len(pairs)

    def f1(cls: int) -> float:
        predicted = sum(1 for _, p in pairs if p == cls)
        actual = sum(1 for g, _ in pairs if g == cls)
        hits = sum(1 for g, p in pairs if g == p == cls)
        precision = hits / predicted if predicted else 0.0
        recall = hits / actual if actual else 0.0
        if precision + recall == 0:
            return 0.0
        return 2 * precision * recall / (precision + recall)

    return accuracy, f1(1), (f1(1) + f1(0)) / 2


def test_acceptance_metrics_equivalence() -> None:
    rng = random.Random(7)
    trials = 1_000
    for _ in range(trials):
        pairs = [(rng.randrange(2), rng.randrange(2)) for _ in range(rng.randrange(1, 60))]
        counts = ConfusionCounts(
            tp=sum(1 for g, p in pairs if (g, p) == (1, 1)),
            fp=sum(1 for g, p in pairs if (g, p) == (0, 1)),
            fn=sum(1 for g, p in pairs if (g, p) == (1, 0)),
            tn=sum(1 for g, p in pairs if (g, p) == (0, 0)),
        )
        for got, want in zip(score_fractions(counts), _definitional_scores(pairs)):
            assert abs(got - want) < 1e-9

    hand = score(ConfusionCounts(tp=2, fp=1, fn=1, tn=2))
    assert (hand.accuracy_pct, hand.f1_positive_pct, hand.macro_f1_pct) == (66.67, 66.67, 66.67)
    print(f"ACCEPTANCE PASS: metrics equivalence ({trials} randomized sets within 1e-9)")


# 4. The rule engine matches a per-prediction rescan of the raw records and is
#    idempotent, including both flip directions.


def _rescan_rules(preds, records, strength="full"):
    out = []
    for pred in preds:
        matching = [
            r
            for r in records
            if r.label is not None and normalize_question(r.question, strength) == pred.key
        ]
        if not matching:
            out.append(pred)
            continue
        target = 1 if sum(r.label for r in matching) == 0 else 0
        if pred.predicted_label == target:
            out.append(pred)
        else:
            out.append(BinaryPrediction(pred.record_id, pred.key, target, "rule_adjusted"))
    return out


def test_acceptance_rule_engine_equivalence() -> None:
    rng = random.Random(13)
    trials = 120
    for trial in range(trials):
        records = []
        tags = [f"t{trial}.{i}" for i in range(rng.randrange(1, 7))]
        for i, tag in enumerate(tags):
            n = rng.randrange(1, 4)
            labels = [0] * n if rng.random() < 0.4 else [rng.randrange(2) for _ in range(n)]
            records.extend(make_records(labels, tag=tag, start_id=i * 10))
        keys = [normalize_question(f"Does rule {t} control the outcome?") for t in tags]
        preds = [
            BinaryPrediction(
                record_id=str(j),
                key=rng.choice(keys) if rng.random() < 0.7 else f"fresh key {trial}.{j}",
                predicted_label=rng.randrange(2),
                provenance="model",
            )
            for j in range(rng.randrange(0, 12))
        ]
        index = build_label_index(records)
        once = apply_rules(preds, index)
        assert once == _rescan_rules(preds, records)
        assert apply_rules(once, index) == once

    zero_index = build_label_index(make_records([0, 0], tag="dz"))
    zero_key = normalize_question("Does rule dz control the outcome?")
    forced_up = apply_rules(
        [BinaryPrediction("0", zero_key, 0, "model")], zero_index
    )[0]
    assert (forced_up.predicted_label, forced_up.provenance) == (1, "rule_adjusted")

    pos_index = build_label_index(make_records([1, 0], tag="dp"))
    pos_key = normalize_question("Does rule dp control the outcome?")
    forced_down = apply_rules(
        [BinaryPrediction("0", pos_key, 1, "model")], pos_index
    )[0]
    assert (forced_down.predicted_label, forced_down.provenance) == (0, "rule_adjusted")
    print(
        f"ACCEPTANCE PASS: rule engine ({trials} randomized sets match the rescan,"
        " idempotent, both flip directions)"
    )


# 5. On a corpus whose test questions recur from training, the rule stage
#    strictly improves both accuracy and F1 over the raw model output.


def test_acceptance_rule_uplift(tmp_path) -> None:
    train_rows = []
    for i in range(4):
        train_rows += question_rows(f"z{i}", [0, 0])
        train_rows += question_rows(f"p{i}", [1, 0])
    test_rows = [
        row(f"Does procedural rule z{i} bar recovery on these facts?",
            f"The overlooked ground under rule z{i}.", label=1, explanation="ctx")
        for i in range(4)
    ] + [
        row(f"Does procedural rule p{i} bar recovery on these facts?",
            f"A surplus ground under rule p{i}.", label=0, explanation="ctx")
        for i in range(4)
    ] + [
        row(f"Does procedural rule f{i} bar recovery on these facts?",
            f"A fresh ground under rule f{i}.", label=0, explanation="ctx")
        for i in range(2)
    ]
    train = write_jsonl(tmp_path / "train.jsonl", train_rows)
    validation = write_jsonl(tmp_path / "validation.jsonl", question_rows("v0", [1, 0]))
    test = write_jsonl(tmp_path / "test.jsonl", test_rows)

    out = tmp_path / "out"
    rc = main(
        ["run", "--train", str(train), "--validation", str(validation), "--test", str(test),
         "--mode", "binary", "--backend", "mock_fixed", "--out", str(out)]
    )
    assert rc == 0
    ruled = json.loads((out / "report.json").read_text(encoding="utf-8"))

    raw_out = tmp_path / "raw_eval"
    rc = main(
        ["evaluate", "--predictions", str(out / "predictions.jsonl"), "--test", str(test),
         "--out", str(raw_out)]
    )
    assert rc == 0
    raw = json.loads((raw_out / "report.json").read_text(encoding="utf-8"))

    assert ruled["accuracy_pct"] > raw["accuracy_pct"]
    assert ruled["f1_positive_pct"] > raw["f1_positive_pct"]
    assert raw["accuracy_pct"] == 60.0 and raw["f1_positive_pct"] == 0.0
    assert ruled["accuracy_pct"] == 100.0 and ruled["f1_positive_pct"] == 100.0
    print(
        "ACCEPTANCE PASS: rule uplift "
        f"(accuracy {raw['accuracy_pct']} -> {ruled['accuracy_pct']}, "
        f"F1 {raw['f1_positive_pct']} -> {ruled['f1_positive_pct']})"
    )


# 6. The choice parser survives realistic response wrappers, agrees with a
#    brace-matching reference extractor, and degrades unparseable output to
#    the none-of-the-above fallback.


def _reference_first_object(raw: str) -> dict | None:
    text = raw.strip()
    if text:
        try:
            whole = json.loads(text)
            if isinstance(whole, dict):
                return whole
        except json.JSONDecodeError:
            pass
    for start, char in enumerate(raw):
        if char != "{":
            continue
        depth, in_string, escaped = 0, False, False
        for end in range(start, len(raw)):
            c = raw[end]
            if in_string:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_string = False
            elif c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(raw[start : end + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
    return None


def _answer_json(answer, reasoning="because") -> str:
    return json.dumps({"correct_answer": answer, "reasoning": reasoning}, ensure_ascii=False)


def test_acceptance_parser_robustness() -> None:
    item = to_multi_choice(make_group([0, 1, 0], tag="pr"))
    choices, nota = item.choices, item.nota_index

    def exact(gold):
        return _answer_json(choices[gold]), gold

    variants = [
        lambda gold: exact(gold),
        lambda gold: (f"```json\n{_answer_json(choices[gold])}\n```", gold),
        lambda gold: (f"```\n{_answer_json(choices[gold])}\n```", gold),
        lambda gold: (f"Here is my verdict:\n{_answer_json(choices[gold])}", gold),
        lambda gold: (f"{_answer_json(choices[gold])}\nHope this helps.", gold),
        lambda gold: (f"Verdict below.\n{_answer_json(choices[gold])}\nDone.", gold),
        lambda gold: (f"\n\t  {_answer_json(choices[gold])}  \n", gold),
        lambda gold: ("The answer { follows: " + _answer_json(choices[gold]), gold),
        lambda gold: (f"[0, 1] {_answer_json(choices[gold])}", gold),
        lambda gold: ("﻿" + _answer_json(choices[gold]), gold),
        lambda gold: (_answer_json(choices[gold].upper()), gold),
        lambda gold: (_answer_json("   " + choices[gold] + "  "), gold),
        lambda gold: (_answer_json(f'"{choices[gold]}"'), gold),
        lambda gold: (_answer_json(f"'{choices[gold]}'"), gold),
        lambda gold: (_answer_json(f"“{choices[gold]}”"), gold),
        lambda gold: (_answer_json(choices[gold].replace(" ", "  ")), gold),
        lambda gold: (_answer_json(f"{gold}: {choices[gold]}"), gold),
        lambda gold: (_answer_json(f"{gold}: some paraphrase"), gold),
        lambda gold: (_answer_json(f"{gold}."), gold),
        lambda gold: (_answer_json(f"{gold})"), gold),
        lambda gold: (_answer_json(f" {gold} : pick"), gold),
        lambda gold: (_answer_json(str(gold)), gold),
        lambda gold: (_answer_json(gold), gold),
        lambda gold: (_answer_json(float(gold)), gold),
        lambda gold: (_answer_json(choices[gold].removesuffix(".")), gold),
        lambda gold: (_answer_json("none of the above"), nota),
        lambda gold: (_answer_json("None of The Above."), nota),
        lambda gold: (_answer_json(NONE_OF_THE_ABOVE), nota),
        lambda gold: (
            json.dumps({"reasoning": "r", "correct_answer": choices[gold], "confidence": 0.9}),
            gold,
        ),
        lambda gold: (
            _answer_json(choices[gold]) + "\n" + _answer_json(choices[(gold + 1) % len(choices)]),
            gold,
        ),
        lambda gold: (f"<response>{_answer_json(choices[gold])}</response>", gold),
        lambda gold: ("Answer:\n\n" + _answer_json(choices[gold], reasoning="multi\nline"), gold),
    ]
    assert len(variants) >= 30

    parsed = 0
    for i, variant in enumerate(variants):
        gold = i % (len(choices) - 1)  # cycle over the real candidates
        raw, expected = variant(gold)
        index, status = parse_mc_response(raw, choices)
        assert index == expected, f"variant {i}: got {index}, wanted {expected}\n{raw}"
        assert status in (PARSE_OK, PARSE_RECOVERED), f"variant {i}: status {status}"
        reference = _reference_first_object(raw)
        assert reference is not None, f"variant {i}: reference found nothing"
        assert extract_answer_object(raw)[0] == reference, f"variant {i}: extractor disagrees"
        parsed += 1

    garbage = [
        "",
        "I am not sure.",
        "2",
        "Answer: probably the first one?",
        "{broken json",
        '{"reasoning": "no answer key"}',
        '{"correct_answer": null}',
        '{"correct_answer": true}',
        '{"correct_answer": ["a", "list"]}',
        '{"correct_answer": {"nested": "object"}}',
        '{"correct_answer": 99}',
        '{"correct_answer": 1.5}',
        _answer_json("an answer nobody offered"),
        _answer_json("prevails on the facts."),  # contained in every candidate
    ]
    assert len(garbage) >= 10
    for raw in garbage:
        with pytest.raises(Unparseable):
            parse_mc_response(raw, choices)
        index, status = resolve_choice(raw, choices)
        assert (index, status) == (nota, "parse_fallback"), raw

    fallback = from_choice(
        item,
        ChoicePrediction(key=item.key, chosen_index=nota, reasoning=None, run_id=0),
        provenance="parse_fallback",
    )
    assert all(p.predicted_label == 0 for p in fallback)
    assert all(p.provenance == "parse_fallback" for p in fallback)
    assert resolve_binary("no idea") == (0, "parse_fallback")
    print(
        f"ACCEPTANCE PASS: parser robustness ({parsed} wrappers decoded, "
        f"{len(garbage)} garbage inputs degraded to the fallback)"
    )


# 7. Prompt fidelity: the frozen instruction texts, the rendered query blocks,
#    and the full prompt stream are byte-stable.


_EXPECTED_MC_INSTRUCTION = (
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

_EXPECTED_BINARY_INSTRUCTION = (
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


def test_acceptance_prompt_fidelity(tmp_path) -> None:
    assert MULTI_CHOICE_SYSTEM_INSTRUCTION == _EXPECTED_MC_INSTRUCTION
    assert BINARY_SYSTEM_INSTRUCTION == _EXPECTED_BINARY_INSTRUCTION

    record = make_records([1], tag="pf")[0]
    record.question = "Q?"
    record.explanation = "E."
    record.candidate = "C."
    assert binary_query_text(record) == "Question:\nQ?\n\nContext:\nE.\n\nChoice:\nC."

    group = make_group([0, 1], tag="pf2")
    for i, candidate in enumerate(group.candidates):
        candidate.question = "Q?"
        candidate.explanation = "E."
        candidate.candidate = f"C{i}."
    group.question, group.explanation = "Q?", "E."
    assert render_mc_block(to_multi_choice(group)) == (
        "Question:\nQ?\n\nContext:\nE.\n\nChoices:\n"
        "{0: C0., \n1: C1., \n2: None of the Above}"
    )

    paths = pipeline_files(tmp_path)

    def build_stream() -> str:
        from lawval.corpus import group_by_question

        train_groups = group_by_question(load_split(paths["train"], "train"))
        test_groups = group_by_question(load_split(paths["test"], "test"))
        pieces = []
        for mode in ("multi_choice", "binary"):
            shots = select_shots(train_groups, mode, seed=42)
            if mode == "multi_choice":
                queries = [render_mc_block(to_multi_choice(g)) for g in test_groups]
            else:
                queries = [
                    binary_query_text(r) for g in test_groups for r in g.candidates
                ]
            for j, query in enumerate(queries):
                bundle = fit_to_budget(build_prompt(query, shots, mode), 8192)
                pieces.append(format_transcript(bundle, str(j)))
        return "".join(pieces)

    first = build_stream()
    second = build_stream()
    assert first == second
    assert first.encode("utf-8") == second.encode("utf-8")
    print(
        "ACCEPTANCE PASS: prompt fidelity (instructions byte-exact, "
        f"{len(first)} transcript bytes reproducible)"
    )


# 8. The report renders the pipe table with the headline F1 before accuracy.


def test_acceptance_report_format() -> None:
    report = MetricsReport(
        accuracy_pct=80.61,
        f1_positive_pct=71.70,
        macro_f1_pct=76.61,
        counts=ConfusionCounts(tp=38, fp=10, fn=20, tn=87),
        n_scored=155,
        n_skipped=0,
    )
    table, doc = render_report(report, {"model": "GPT-4"})
    assert table == "Model | F1 Score | Accuracy\nGPT-4 | 71.70 | 80.61\n"
    assert doc["headline_f1_pct"] == 71.70
    assert doc["accuracy_pct"] == 80.61
    print('ACCEPTANCE PASS: report format ("GPT-4 | 71.70 | 80.61")')
