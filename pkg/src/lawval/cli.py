"""Command-line pipeline: convert, predict, apply-rules, evaluate, run.

Stages communicate through files under the output directory, so each
subcommand can run standalone or chained by `run`. A lock file guards the
output directory against concurrent invocations. Configuration comes from one
JSON file plus flag overrides.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from hashlib import sha256
from pathlib import Path

from filelock import FileLock, Timeout

from .corpus import MATCH_STRENGTHS, load_split, group_by_question, normalize_question
from .errors import PipelineError
from .figures import save_report_figures
from .metrics import UnlabeledGold, confusion, render_report, score
from .prompting import (
    MODES,
    build_prompt,
    fit_to_budget,
    format_transcript,
    load_system_instruction,
    select_shots,
)
from .provider import (
    ModelResponse,
    ProviderConfig,
    ProviderRejection,
    ResponseCache,
    TransientExhausted,
    aggregate_runs,
    complete,
    majority_vote,
    make_backend,
    resolve_binary,
    resolve_choice,
)
from .rules import apply_rules, build_label_index, rule_report
from .taskform import (
    PROV_FALLBACK,
    PROV_MODEL,
    PROVENANCES,
    BinaryPrediction,
    ChoicePrediction,
    binary_query_text,
    from_choice,
    read_items,
    read_predictions,
    render_mc_block,
    to_multi_choice,
    write_items,
    write_predictions,
)

log = logging.getLogger(__name__)

LOCK_NAME = ".lock"


class ConfigError(PipelineError):
    pass


@dataclass
class RunConfig:
    train: str = ""
    validation: str = ""
    test: str = ""
    out: str = "out"
    cache_dir: str = ""
    mode: str = "multi_choice"
    rules_enabled: bool = True
    shots_seed: int = 0
    max_tokens: int = 8192
    include_analysis: bool = False
    match_strength: str = "full"
    f1_variant_for_headline: str = "positive"
    system_instruction_file: str = ""
    transcript: bool = False
    provider: ProviderConfig = field(default_factory=ProviderConfig)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path}: expected a JSON object")
        provider_raw = raw.pop("provider", {})
        known = {f.name for f in fields(cls)} - {"provider"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"config file {path}: unknown keys {sorted(unknown)}")
        provider_known = {f.name for f in fields(ProviderConfig)}
        unknown = set(provider_raw) - provider_known
        if unknown:
            raise ConfigError(f"config file {path}: unknown provider keys {sorted(unknown)}")
        return cls(provider=ProviderConfig(**provider_raw), **raw)

    def digest(self) -> str:
        canonical = json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)
        return sha256(canonical.encode("utf-8")).hexdigest()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.match_strength not in MATCH_STRENGTHS:
            raise ConfigError(f"unknown match_strength {self.match_strength!r}")
        if self.f1_variant_for_headline not in ("positive", "macro"):
            raise ConfigError(f"unknown f1_variant_for_headline {self.f1_variant_for_headline!r}")
        if self.max_tokens <= 0:
            raise ConfigError("max_tokens must be positive")
        try:
            self.provider.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _require(value: str, name: str) -> str:
    if not value:
        raise ConfigError(f"config value {name!r} is required for this command")
    return value


def _ensure_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_path(cfg: RunConfig, split: str) -> str:
    return _require(getattr(cfg, "validation" if split == "validation" else split), split)


def cmd_convert(cfg: RunConfig, split: str = "test") -> Path:
    """Convert one split to the multi-choice JSONL form."""
    cfg.validate()
    records = load_split(_split_path(cfg, split), split)
    groups = group_by_question(records, cfg.match_strength)
    items = [to_multi_choice(g, include_analysis=cfg.include_analysis) for g in groups]
    out = _ensure_out(cfg)
    dest = out / f"{split}_multi_choice.jsonl"
    write_items(items, dest)
    log.info("converted %d records into %d items -> %s", len(records), len(items), dest)
    return dest


def _oracle_answers_mc(items) -> dict:
    answers = {}
    for item in items:
        if item.gold_index is None:
            raise ConfigError("mock_oracle needs gold labels on the predicted split")
        answers[normalize_question(item.question)] = json.dumps(
            {"correct_answer": item.choices[item.gold_index], "reasoning": "oracle"},
            ensure_ascii=False,
        )
    return answers


def _oracle_answers_binary(records) -> dict:
    answers = {}
    for record in records:
        if record.label is None:
            raise ConfigError("mock_oracle needs gold labels on the predicted split")
        key = (normalize_question(record.question), normalize_question(record.candidate))
        answers[key] = str(record.label)
    return answers


def _run_completions(bundles, pcfg: ProviderConfig, backend, cache: ResponseCache):
    """All completions, one list of responses per run. Failed items degrade to
    empty unparseable responses instead of aborting the batch."""
    responses: list[list[ModelResponse]] = []
    failures = 0

    for run_id in range(pcfg.runs):
        def one(bundle, run_id=run_id):
            try:
                return complete(bundle, pcfg, run_id, backend=backend, cache=cache), False
            except (TransientExhausted, ProviderRejection) as exc:
                log.warning("completion failed on run %d: %s", run_id, exc)
                failed = ModelResponse(
                    raw="",
                    parsed_answer=None,
                    parsed_reasoning=None,
                    parse_status="unparseable",
                    latency=0.0,
                    from_cache=False,
                )
                return failed, True

        with ThreadPoolExecutor(max_workers=pcfg.parallelism) as pool:
            results = list(pool.map(one, bundles))
        responses.append([response for response, _ in results])
        failures += sum(1 for _, failed in results if failed)
    return responses, failures


def _winning_provenance(votes: list[int], statuses: list[str], winner: int) -> str:
    winning = [s for vote, s in zip(votes, statuses) if vote == winner]
    return PROV_MODEL if any(s != PROV_FALLBACK for s in winning) else PROV_FALLBACK


def _decode_multi_choice(items, responses) -> tuple[list[BinaryPrediction], Counter]:
    preds: list[BinaryPrediction] = []
    status_counts: Counter = Counter()
    for i, item in enumerate(items):
        votes: list[ChoicePrediction] = []
        statuses: list[str] = []
        for run_id, run in enumerate(responses):
            response = run[i]
            index, status = resolve_choice(response.raw, item.choices)
            votes.append(
                ChoicePrediction(
                    key=item.key,
                    chosen_index=index,
                    reasoning=response.parsed_reasoning,
                    run_id=run_id,
                )
            )
            statuses.append(status)
            status_counts["unparseable" if status == PROV_FALLBACK else status] += 1
        aggregate = aggregate_runs(votes)
        provenance = _winning_provenance(
            [v.chosen_index for v in votes], statuses, aggregate.chosen_index
        )
        preds.extend(from_choice(item, aggregate, provenance=provenance))
    return preds, status_counts


def _decode_binary(records, responses, strength: str) -> tuple[list[BinaryPrediction], Counter]:
    preds: list[BinaryPrediction] = []
    status_counts: Counter = Counter()
    for i, record in enumerate(records):
        votes: list[int] = []
        statuses: list[str] = []
        for run in responses:
            label, status = resolve_binary(run[i].raw)
            votes.append(label)
            statuses.append(status)
            status_counts["unparseable" if status == PROV_FALLBACK else status] += 1
        winner = majority_vote(votes)
        preds.append(
            BinaryPrediction(
                record_id=record.record_id,
                key=normalize_question(record.question, strength),
                predicted_label=winner,
                provenance=_winning_provenance(votes, statuses, winner),
            )
        )
    return preds, status_counts


def _write_submission(preds: list[BinaryPrediction], test_path: str, dest: Path) -> None:
    """One predicted 0/1 per test record, in the test file's own order."""
    by_id = {p.record_id: p.predicted_label for p in preds}
    lines = []
    for record in load_split(test_path, "test"):
        if record.record_id not in by_id:
            raise PipelineError(f"no prediction for test record {record.record_id!r}")
        lines.append(str(by_id[record.record_id]))
    dest.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_predict(cfg: RunConfig, items_path: str | Path | None = None) -> Path:
    """Prompt the configured backend over the test split and write predictions."""
    cfg.validate()
    out = _ensure_out(cfg)
    test_path = _require(cfg.test, "test")
    test_records = load_split(test_path, "test")
    train_groups = group_by_question(load_split(_require(cfg.train, "train"), "train"), cfg.match_strength)
    cache = ResponseCache(cfg.cache_dir or Path(cfg.out) / "cache")
    system_override = (
        load_system_instruction(cfg.system_instruction_file)
        if cfg.system_instruction_file
        else None
    )
    pcfg = cfg.provider

    if cfg.mode == "multi_choice":
        if items_path is not None:
            items = read_items(items_path)
        else:
            groups = group_by_question(test_records, cfg.match_strength)
            items = [to_multi_choice(g, include_analysis=cfg.include_analysis) for g in groups]
        shots = select_shots(
            train_groups, "multi_choice", cfg.shots_seed, include_analysis=cfg.include_analysis
        )
        bundles = [
            fit_to_budget(
                build_prompt(render_mc_block(item), shots, "multi_choice", system_override),
                cfg.max_tokens,
            )
            for item in items
        ]
        transcript_labels = [item.key for item in items]
        oracle = _oracle_answers_mc(items) if pcfg.backend == "mock_oracle" else None
    else:
        shots = select_shots(
            train_groups, "binary", cfg.shots_seed, include_analysis=cfg.include_analysis
        )
        bundles = [
            fit_to_budget(
                build_prompt(
                    binary_query_text(r, include_analysis=cfg.include_analysis),
                    shots,
                    "binary",
                    system_override,
                ),
                cfg.max_tokens,
            )
            for r in test_records
        ]
        transcript_labels = [r.record_id for r in test_records]
        oracle = _oracle_answers_binary(test_records) if pcfg.backend == "mock_oracle" else None

    backend = make_backend(pcfg, cfg.mode, oracle_answers=oracle)
    responses, failures = _run_completions(bundles, pcfg, backend, cache)
    if cfg.mode == "multi_choice":
        preds, status_counts = _decode_multi_choice(items, responses)
    else:
        preds, status_counts = _decode_binary(test_records, responses, cfg.match_strength)

    predictions_path = out / "predictions.jsonl"
    write_predictions(preds, predictions_path)
    _write_submission(preds, test_path, out / "submission.txt")

    hits = sum(1 for run in responses for response in run if response.from_cache)
    total = sum(len(run) for run in responses)
    manifest = {
        "config_digest": cfg.digest(),
        "mode": cfg.mode,
        "backend": pcfg.backend,
        "model_name": pcfg.model_name,
        "runs": pcfg.runs,
        "query_units": len(bundles),
        "predictions": len(preds),
        "cache": {
            "hits": hits,
            "misses": total - hits,
            "hit_rate": round(hits / total, 4) if total else 0.0,
        },
        "backend_calls": backend.calls,
        "parse_status": {
            "ok": status_counts.get("ok", 0),
            "recovered": status_counts.get("recovered", 0),
            "unparseable": status_counts.get("unparseable", 0),
        },
        "provider_failures": failures,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    if cfg.transcript:
        with open(out / "prompt_transcript.txt", "w", encoding="utf-8") as fh:
            for label, bundle in zip(transcript_labels, bundles):
                fh.write(format_transcript(bundle, str(label)))
    log.info("wrote %d predictions -> %s", len(preds), predictions_path)
    return predictions_path


def cmd_apply_rules(cfg: RunConfig, predictions_path: str | Path) -> tuple[Path, Path]:
    """Adjust a predictions file with train/validation label statistics."""
    cfg.validate()
    out = _ensure_out(cfg)
    train = load_split(_require(cfg.train, "train"), "train")
    val = load_split(_require(cfg.validation, "validation"), "validation")
    index = build_label_index(train + val, cfg.match_strength)
    before = read_predictions(predictions_path)
    after = apply_rules(before, index)
    report = rule_report(before, after)

    adjusted_path = out / "predictions.rules.jsonl"
    write_predictions(after, adjusted_path)
    report_path = out / "rule_report.json"
    report_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if cfg.test:
        _write_submission(after, cfg.test, out / "submission.rules.txt")
    log.info(
        "rules flipped %d up, %d down, %d untouched -> %s",
        report.flips_0_to_1,
        report.flips_1_to_0,
        report.untouched,
        adjusted_path,
    )
    return adjusted_path, report_path


def cmd_evaluate(
    cfg: RunConfig, predictions_path: str | Path, gold_path: str | Path | None = None
) -> dict:
    """Score a predictions file against gold labels and render the report."""
    cfg.validate()
    out = _ensure_out(cfg)
    preds = read_predictions(predictions_path)
    gold = load_split(gold_path if gold_path is not None else _require(cfg.test, "test"), "test")
    counts, skipped = confusion(preds, gold)
    report = score(counts, n_skipped=skipped)
    provenance = Counter(p.provenance for p in preds)
    table, doc = render_report(
        report,
        {
            "model": cfg.provider.model_name,
            "f1_variant": cfg.f1_variant_for_headline,
            "mode": cfg.mode,
            "config_digest": cfg.digest(),
            "provenance": {name: provenance.get(name, 0) for name in PROVENANCES},
        },
    )
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "report.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    save_report_figures(doc, out)
    print(table, end="")
    return doc


def cmd_run(cfg: RunConfig) -> dict:
    """convert -> predict -> (rules) -> evaluate, all intermediates persisted."""
    cfg.validate()
    artifacts: dict = {}
    items_path = cmd_convert(cfg, "test")
    artifacts["items"] = str(items_path)
    predictions_path = cmd_predict(
        cfg, items_path=items_path if cfg.mode == "multi_choice" else None
    )
    artifacts["predictions"] = str(predictions_path)
    if cfg.rules_enabled:
        predictions_path, report_path = cmd_apply_rules(cfg, predictions_path)
        artifacts["predictions_after_rules"] = str(predictions_path)
        artifacts["rule_report"] = str(report_path)
    try:
        artifacts["report"] = cmd_evaluate(cfg, predictions_path)
    except UnlabeledGold:
        log.warning("test split has no gold labels; skipping evaluation")
    return artifacts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lawval",
        description="Validate legal answer candidates with a few-shot chat model.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--train", help="train split JSONL")
    common.add_argument("--validation", help="validation split JSONL")
    common.add_argument("--test", help="test split JSONL")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--backend", choices=("http_chat", "mock_oracle", "mock_fixed", "mock_scripted"))
    common.add_argument("--runs", type=int, help="repeated prediction passes")
    common.add_argument("--no-rules", action="store_true", help="disable the rule stage in `run`")
    common.add_argument("--seed", type=int, help="shot-selection seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--cache-dir", help="response cache directory")
    common.add_argument("--model", help="model name sent to the provider")

    p_convert = sub.add_parser("convert", parents=[common], help="emit the multi-choice dataset")
    p_convert.add_argument("--split", choices=("train", "validation", "test"), default="test")

    p_predict = sub.add_parser("predict", parents=[common], help="run the model over the test split")
    p_predict.add_argument("--items", help="pre-converted multi-choice JSONL to predict from")
    p_predict.add_argument("--transcript", action="store_true", help="dump prompts to a transcript file")

    p_rules = sub.add_parser("apply-rules", parents=[common], help="apply label-statistics rules")
    p_rules.add_argument("--predictions", required=True, help="predictions JSONL to adjust")

    p_eval = sub.add_parser("evaluate", parents=[common], help="score predictions against gold")
    p_eval.add_argument("--predictions", required=True, help="predictions JSONL to score")
    p_eval.add_argument("--gold", help="gold JSONL (defaults to the test split)")

    sub.add_parser("run", parents=[common], help="full pipeline")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.train:
        cfg.train = args.train
    if args.validation:
        cfg.validation = args.validation
    if args.test:
        cfg.test = args.test
    if args.mode:
        cfg.mode = args.mode
    if args.backend:
        cfg.provider.backend = args.backend
    if args.runs is not None:
        cfg.provider.runs = args.runs
    if args.no_rules:
        cfg.rules_enabled = False
    if args.seed is not None:
        cfg.shots_seed = args.seed
        cfg.provider.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.cache_dir:
        cfg.cache_dir = args.cache_dir
    if args.model:
        cfg.provider.model_name = args.model
    if getattr(args, "transcript", False):
        cfg.transcript = True
    cfg.validate()
    return cfg


def _dispatch(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.command == "convert":
        print(cmd_convert(cfg, args.split))
    elif args.command == "predict":
        print(cmd_predict(cfg, items_path=args.items))
    elif args.command == "apply-rules":
        adjusted, report = cmd_apply_rules(cfg, args.predictions)
        print(adjusted)
        print(report)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.predictions, gold_path=args.gold)
    elif args.command == "run":
        artifacts = cmd_run(cfg)
        for name in ("items", "predictions", "predictions_after_rules", "rule_report"):
            if name in artifacts:
                print(artifacts[name])
    else:
        raise AssertionError(f"unhandled command {args.command!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
        out = _ensure_out(cfg)
        lock = FileLock(out / LOCK_NAME)
        try:
            with lock.acquire(timeout=0):
                return _dispatch(args, cfg)
        except Timeout:
            print(
                f"error: output directory {out} is locked by another invocation",
                file=sys.stderr,
            )
            return 3
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
