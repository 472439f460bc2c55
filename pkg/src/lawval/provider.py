"""Model backends, response caching, retries, and response decoding.

Completions are cache-first: the cache key digests the model, temperature,
full bundle, and run id, so repeated runs of the same configuration never hit
the network twice for the same prompt. Transient backend failures retry with
exponential backoff and jitter; auth failures never retry.
"""

from __future__ import annotations

import json
import logging
import os
import random
import re
import tempfile
import time
from collections import Counter
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import requests

from .corpus import normalize_question
from .errors import PipelineError
from .prompting import PromptBundle, bundle_messages
from .taskform import NONE_OF_THE_ABOVE, ChoicePrediction, parse_query_sections

log = logging.getLogger(__name__)

BACKENDS = ("http_chat", "mock_oracle", "mock_fixed", "mock_scripted")

API_KEY_ENV = "LMH_API_KEY"

PARSE_OK = "ok"
PARSE_RECOVERED = "recovered"
PARSE_UNPARSEABLE = "unparseable"

# Leading "index:"-style answers: "1: text", "2.", "0)", or a bare digit.
_INDEX_PREFIX_RE = re.compile(r"^\s*(\d+)\s*(?:[:.)\]]|$)")
_BINARY_RE = re.compile(r"^([01])([^\w]*)$")
_QUOTE_PAIRS = (('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’"), ("`", "`"))


class TransientBackendError(Exception):
    """Internal signal that an attempt failed but a retry may succeed."""


class AuthFailure(PipelineError):
    pass


class ProviderRejection(PipelineError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"provider rejected the request (status {status}): {detail}")


class TransientExhausted(PipelineError):
    def __init__(self, attempts: int, last_error: str):
        self.attempts = attempts
        super().__init__(f"backend still failing after {attempts} attempts: {last_error}")


class Unparseable(PipelineError):
    pass


@dataclass
class ProviderConfig:
    backend: str = "http_chat"
    model_name: str = "gpt-4"
    endpoint: str = ""
    # Deterministic decoding by default; the upstream setup does not state a
    # sampling temperature, so 0 is this pipeline's documented choice.
    temperature: float = 0.0
    max_retries: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0
    parallelism: int = 1
    runs: int = 3
    seed: int = 0
    # mock_scripted reads responses from this JSONL file.
    script_path: str = ""
    # mock_fixed returns this text (empty means the per-mode default).
    fixed_response: str = ""

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class ModelResponse:
    raw: str
    parsed_answer: str | None
    parsed_reasoning: str | None
    parse_status: str
    latency: float
    from_cache: bool


def cache_key(model_name: str, temperature: float, bundle: PromptBundle, run_id: int) -> str:
    """Hex digest identifying one completion request."""
    payload = json.dumps(
        {
            "model_name": model_name,
            "temperature": temperature,
            "run_id": run_id,
            "bundle": {
                "system_instruction": bundle.system_instruction,
                "shots": bundle.shots,
                "query": bundle.query,
                "mode": bundle.mode,
            },
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Directory of digest-named JSON files holding raw responses.

    Writes go through a temp file and os.replace, so concurrent writers of the
    same key are last-write-wins with no torn reads.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, digest: str) -> Path:
        return self.directory / f"{digest}.json"

    def get(self, digest: str) -> dict | None:
        path = self.path_for(digest)
        try:
            with open(path, encoding="utf-8") as fh:
                return json.load(fh)
        except FileNotFoundError:
            return None
        except json.JSONDecodeError:
            log.warning("discarding unreadable cache entry %s", path)
            return None

    def put(self, digest: str, payload: dict) -> None:
        fd, tmp_name = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, ensure_ascii=False, sort_keys=True)
            os.replace(tmp_name, self.path_for(digest))
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise


class HttpChatBackend:
    """POSTs chat completions to a configured endpoint, bearer-authenticated."""

    def __init__(self, cfg: ProviderConfig):
        if not cfg.endpoint:
            raise ValueError("http_chat backend needs an endpoint URL")
        self.cfg = cfg
        self.calls = 0

    def __call__(self, bundle: PromptBundle, run_id: int) -> str:
        self.calls += 1
        api_key = os.environ.get(API_KEY_ENV)
        if not api_key:
            raise AuthFailure(f"environment variable {API_KEY_ENV} is not set")
        try:
            response = requests.post(
                self.cfg.endpoint,
                headers={
                    "Authorization": f"Bearer {api_key}",
                    "Content-Type": "application/json",
                },
                json={
                    "model": self.cfg.model_name,
                    "temperature": self.cfg.temperature,
                    "messages": bundle_messages(bundle),
                },
                timeout=self.cfg.timeout,
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientBackendError(str(exc)) from exc
        if response.status_code in (401, 403):
            raise AuthFailure(f"provider returned HTTP {response.status_code}")
        if response.status_code == 429 or response.status_code >= 500:
            raise TransientBackendError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise ProviderRejection(response.status_code, response.text[:200])
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderRejection(response.status_code, f"malformed completion body: {exc}") from exc


def _query_question_key(bundle: PromptBundle) -> str:
    return normalize_question(parse_query_sections(bundle.query).get("question", ""))


class OracleBackend:
    """Answers from a prebuilt gold table; keys recovered from the query text."""

    def __init__(self, answers: dict):
        self.answers = dict(answers)
        self.calls = 0

    def __call__(self, bundle: PromptBundle, run_id: int) -> str:
        self.calls += 1
        sections = parse_query_sections(bundle.query)
        question = normalize_question(sections.get("question", ""))
        if bundle.mode == "binary":
            key: object = (question, normalize_question(sections.get("choice", "")))
        else:
            key = question
        try:
            return self.answers[key]
        except KeyError:
            raise ProviderRejection(0, f"oracle has no answer for {key!r}") from None


class FixedBackend:
    """Returns the same response for every request."""

    def __init__(self, response: str):
        self.response = response
        self.calls = 0

    def __call__(self, bundle: PromptBundle, run_id: int) -> str:
        self.calls += 1
        return self.response


class ScriptedBackend:
    """Replays responses from a JSONL file keyed by question key and run id."""

    def __init__(self, path: str | Path):
        self.calls = 0
        self.responses: dict[tuple[str, int], str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                self.responses[(row["key"], int(row["run_id"]))] = row["response"]

    def __call__(self, bundle: PromptBundle, run_id: int) -> str:
        self.calls += 1
        key = _query_question_key(bundle)
        try:
            return self.responses[(key, run_id)]
        except KeyError:
            raise ProviderRejection(0, f"no scripted response for ({key!r}, run {run_id})") from None


def default_fixed_response(mode: str) -> str:
    if mode == "binary":
        return "0"
    return json.dumps(
        {"correct_answer": NONE_OF_THE_ABOVE, "reasoning": "fixed backend default"}
    )


def make_backend(cfg: ProviderConfig, mode: str, oracle_answers: dict | None = None):
    if cfg.backend == "http_chat":
        return HttpChatBackend(cfg)
    if cfg.backend == "mock_oracle":
        if oracle_answers is None:
            raise ValueError("mock_oracle backend needs an answer table")
        return OracleBackend(oracle_answers)
    if cfg.backend == "mock_fixed":
        return FixedBackend(cfg.fixed_response or default_fixed_response(mode))
    if cfg.backend == "mock_scripted":
        if not cfg.script_path:
            raise ValueError("mock_scripted backend needs script_path")
        return ScriptedBackend(cfg.script_path)
    raise ValueError(f"unknown backend {cfg.backend!r}")


def _invoke_with_retries(bundle: PromptBundle, cfg: ProviderConfig, run_id: int, backend) -> str:
    attempts = cfg.max_retries + 1
    for attempt in range(attempts):
        try:
            return backend(bundle, run_id)
        except TransientBackendError as exc:
            if attempt == attempts - 1:
                raise TransientExhausted(attempts, str(exc)) from exc
            delay = cfg.backoff_base * (2 ** attempt) * (0.5 + random.random())
            log.debug("transient backend failure (%s); retrying in %.2fs", exc, delay)
            time.sleep(delay)
    raise AssertionError("unreachable")


def extract_answer_object(raw: str) -> tuple[dict, str]:
    """Find the first JSON object in a response, tolerating prose and fences.

    Returns (object, status): "ok" when the whole response is the object,
    "recovered" when it had to be dug out. Raises Unparseable when no object
    exists.
    """
    text = raw.strip()
    if text:
        try:
            obj = json.loads(text)
            if isinstance(obj, dict):
                return obj, PARSE_OK
        except json.JSONDecodeError:
            pass
    decoder = json.JSONDecoder()
    idx = raw.find("{")
    while idx != -1:
        try:
            obj, _end = decoder.raw_decode(raw, idx)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj, PARSE_RECOVERED
        idx = raw.find("{", idx + 1)
    raise Unparseable("no JSON object found in response")


def _loose_text(text: str) -> str:
    s = text.strip()
    changed = True
    while changed and len(s) >= 2:
        changed = False
        for opener, closer in _QUOTE_PAIRS:
            if s.startswith(opener) and s.endswith(closer):
                s = s[len(opener):-len(closer)].strip()
                changed = True
                break
    return " ".join(s.casefold().split())


def parse_mc_response(raw: str, choices: list[str]) -> tuple[int, str]:
    """Decode a multi-choice response into a chosen index.

    Matching order: exact choice text (ok), whitespace/case-normalized match,
    a leading "index:" pattern, then unique containment (all recovered).
    Raises Unparseable when nothing matches.
    """
    if not choices:
        raise ValueError("choices must be non-empty")
    obj, extraction = extract_answer_object(raw)
    answer = obj.get("correct_answer")
    if answer is None:
        raise Unparseable("response object has no 'correct_answer' key")
    if isinstance(answer, bool):
        raise Unparseable(f"'correct_answer' is a boolean: {answer!r}")
    if isinstance(answer, (int, float)):
        index = int(answer)
        if index == answer and 0 <= index < len(choices):
            return index, PARSE_RECOVERED
        raise Unparseable(f"choice index {answer!r} out of range")
    if not isinstance(answer, str):
        raise Unparseable(f"'correct_answer' has type {type(answer).__name__}")

    if answer in choices:
        return choices.index(answer), PARSE_OK if extraction == PARSE_OK else PARSE_RECOVERED

    loose = _loose_text(answer)
    loose_choices = [_loose_text(c) for c in choices]
    hits = [i for i, c in enumerate(loose_choices) if c and c == loose]
    if len(hits) == 1:
        return hits[0], PARSE_RECOVERED

    match = _INDEX_PREFIX_RE.match(answer)
    if match:
        index = int(match.group(1))
        if 0 <= index < len(choices):
            return index, PARSE_RECOVERED

    if loose:
        hits = [i for i, c in enumerate(loose_choices) if c and (loose in c or c in loose)]
        if len(hits) == 1:
            return hits[0], PARSE_RECOVERED

    raise Unparseable(f"no choice matches {answer[:80]!r}")


def parse_binary_response(raw: str) -> tuple[int, str]:
    """Decode a 0/1 response; quotes are stripped before the exact match."""
    s = raw.strip()
    for opener, closer in _QUOTE_PAIRS:
        if len(s) >= 2 and s.startswith(opener) and s.endswith(closer):
            s = s[len(opener):-len(closer)].strip()
            break
    if s in ("0", "1"):
        return int(s), PARSE_OK
    match = _BINARY_RE.match(s)
    if match:
        return int(match.group(1)), PARSE_RECOVERED
    raise Unparseable(f"expected 0 or 1, got {raw[:50]!r}")


def resolve_choice(raw: str, choices: list[str]) -> tuple[int, str]:
    """parse_mc_response with the unparseable fallback: last choice, flagged."""
    try:
        return parse_mc_response(raw, choices)
    except Unparseable:
        return len(choices) - 1, "parse_fallback"


def resolve_binary(raw: str) -> tuple[int, str]:
    """parse_binary_response with the unparseable fallback: 0, flagged."""
    try:
        return parse_binary_response(raw)
    except Unparseable:
        return 0, "parse_fallback"


def _parse_for_mode(raw: str, mode: str) -> tuple[str | None, str | None, str]:
    if mode == "binary":
        try:
            label, status = parse_binary_response(raw)
            return str(label), None, status
        except Unparseable:
            return None, None, PARSE_UNPARSEABLE
    try:
        obj, extraction = extract_answer_object(raw)
    except Unparseable:
        return None, None, PARSE_UNPARSEABLE
    answer = obj.get("correct_answer")
    reasoning = obj.get("reasoning")
    reasoning_text = str(reasoning) if reasoning is not None else None
    if answer is None or isinstance(answer, (dict, list)):
        return None, reasoning_text, PARSE_UNPARSEABLE
    return str(answer), reasoning_text, extraction


def complete(
    bundle: PromptBundle,
    cfg: ProviderConfig,
    run_id: int,
    *,
    backend,
    cache: ResponseCache | None = None,
) -> ModelResponse:
    """One completion for one run, cache-first.

    A cache hit never touches the backend. On a miss the backend is invoked
    with up to 1 + max_retries attempts, and the raw response is written to
    the cache before returning.
    """
    digest = cache_key(cfg.model_name, cfg.temperature, bundle, run_id)
    started = time.monotonic()
    raw: str | None = None
    from_cache = False
    if cache is not None:
        hit = cache.get(digest)
        if hit is not None:
            raw = hit["raw"]
            from_cache = True
    if raw is None:
        raw = _invoke_with_retries(bundle, cfg, run_id, backend)
        if cache is not None:
            cache.put(
                digest,
                {
                    "digest": digest,
                    "model_name": cfg.model_name,
                    "temperature": cfg.temperature,
                    "run_id": run_id,
                    "mode": bundle.mode,
                    "raw": raw,
                },
            )
    answer, reasoning, status = _parse_for_mode(raw, bundle.mode)
    return ModelResponse(
        raw=raw,
        parsed_answer=answer,
        parsed_reasoning=reasoning,
        parse_status=status,
        latency=time.monotonic() - started,
        from_cache=from_cache,
    )


def majority_vote(values: list[int]) -> int:
    """Most common value; ties break toward the smallest."""
    if not values:
        raise ValueError("nothing to vote on")
    counts = Counter(values)
    best = max(counts.values())
    return min(v for v, n in counts.items() if n == best)


def aggregate_runs(preds: list[ChoicePrediction]) -> ChoicePrediction:
    """Collapse repeated-run choice predictions for one item by majority vote.

    Ties break toward the smallest index. The reasoning and run id come from
    the winning vote with the smallest run id, so the result is invariant
    under input permutation.
    """
    if not preds:
        raise ValueError("no predictions to aggregate")
    keys = {p.key for p in preds}
    if len(keys) > 1:
        raise ValueError(f"predictions span multiple items: {sorted(keys)}")
    winner = majority_vote([p.chosen_index for p in preds])
    source = min(
        (p for p in preds if p.chosen_index == winner),
        key=lambda p: p.run_id,
    )
    return ChoicePrediction(
        key=source.key,
        chosen_index=winner,
        reasoning=source.reasoning,
        run_id=source.run_id,
    )
