"""Golden examples: prompting a teacher, parsing its answers, scoring and storing them."""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .data import Dataset, DownstreamModel, evaluate_downstream, split
from .expr import (
    SEP_TEXT,
    AllSegmentsFailed,
    EvalPolicy,
    ParseResult,
    Segment,
    TransformationSequence,
    Vocabulary,
    apply_sequence,
    check_random_state,
    parse_text,
    random_valid_segment,
    to_text,
)

log = logging.getLogger(__name__)

SOURCES = ("teacher_api", "scripted", "search")


class ConfigError(ValueError):
    """Bad or incomplete configuration, detected before any work starts."""


class TeacherError(RuntimeError):
    pass


class DuplicateSequence(ValueError):
    pass


class CorpusFormatError(ValueError):
    def __init__(self, message, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# --- prompt ------------------------------------------------------------------------

DEFAULT_TASK = (
    "You are an expert in feature engineering. You are given a dataset's features "
    "and a set of operators. Transform the dataset by composing new features from "
    "the original ones so that a downstream {task} model performs better."
)

DEFAULT_FEW_SHOT = (
    "Example answer for features f0, f1, f2:\n"
    "f0 f1 add token_sep f2 log token_sep f0 f2 multiply sqrt\n"
    "Give only the feature combinations in your response."
)


@dataclass(frozen=True)
class PromptSpec:
    task_description: str
    feature_tokens: tuple[str, ...]
    unary_tokens: tuple[str, ...]
    binary_tokens: tuple[str, ...]
    force_rules: tuple[str, ...]
    few_shot_example: str = DEFAULT_FEW_SHOT


def default_force_rules(max_segments: int = 50) -> tuple[str, ...]:
    return (
        f"Generate multiple (less than {max_segments}) feature combinations.",
        f"Use '{SEP_TEXT}' to separate different combinations.",
        "Each combination must include at least one feature token and one operator token.",
        "A binary operator token operates on exactly two preceding operands.",
        "A unary operator token operates on exactly one preceding operand.",
        "Write every combination in postfix notation (operands before their operator).",
        "Only use the listed feature and operator tokens.",
        "Only give the feature combinations in the response, with no explanation.",
    )


def default_prompt_spec(vocab: Vocabulary, task: str = "prediction", max_segments: int = 50) -> PromptSpec:
    return PromptSpec(
        task_description=DEFAULT_TASK.format(task=task),
        feature_tokens=tuple(f"f{i}" for i in range(vocab.n_features)),
        unary_tokens=tuple(o.name for o in vocab.operators if o.arity == 1),
        binary_tokens=tuple(o.name for o in vocab.operators if o.arity == 2),
        force_rules=default_force_rules(max_segments),
    )


def build_prompt(dataset: Dataset, vocab: Vocabulary, spec: PromptSpec | None = None) -> str:
    if spec is None:
        spec = default_prompt_spec(vocab, dataset.task)
    expected = default_prompt_spec(vocab)
    if (spec.feature_tokens, spec.unary_tokens, spec.binary_tokens) != (
        expected.feature_tokens, expected.unary_tokens, expected.binary_tokens
    ):
        raise ConfigError("prompt token lists do not match the vocabulary")
    if dataset.n_features != vocab.n_features:
        raise ConfigError("dataset feature count does not match the vocabulary")
    features = "\n".join(
        f"- {tok}: {name}" for tok, name in zip(spec.feature_tokens, dataset.feature_names)
    )
    rules = "\n".join(f"{i}. {r}" for i, r in enumerate(spec.force_rules, 1))
    return (
        f"## Task Description\n{spec.task_description}\n\n"
        f"## Feature Description\nFeature tokens:\n{features}\n\n"
        f"## Operator Description\n"
        f"Unary operator tokens: [{', '.join(spec.unary_tokens)}]\n"
        f"Binary operator tokens: [{', '.join(spec.binary_tokens)}]\n\n"
        f"## Force Prompt\n{rules}\n\n"
        f"## Few-shot Prompt\n{spec.few_shot_example}\n"
    )


# --- teacher client ---------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4o"
    temperature: float = 1.0
    max_retries: int = 4
    requests_per_minute: float = 60.0
    api_key_env_var: str = "FEATFORGE_API_KEY"
    timeout: float = 60.0
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.requests_per_minute <= 0:
            raise ConfigError("requests_per_minute must be > 0")

    def api_key(self) -> str:
        key = os.environ.get(self.api_key_env_var)
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env_var} is not set")
        return key


class RateLimiter:
    """Token bucket refilled at ``per_minute`` tokens per minute, burst of one."""

    def __init__(self, per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / per_minute
        self.clock = clock
        self.sleep = sleep
        self._next = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            if self._next is None or now >= self._next:
                self._next = now + self.interval
                return
            wait = self._next - now
            self._next += self.interval
        self.sleep(wait)


def request_teacher(
    prompt: str,
    cfg: TeacherConfig,
    *,
    client: httpx.Client | None = None,
    limiter: RateLimiter | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """One chat-completion round trip with retry and exponential backoff."""
    key = cfg.api_key()
    limiter = limiter or RateLimiter(cfg.requests_per_minute, sleep=sleep)
    body = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    }
    headers = {"Authorization": f"Bearer {key}"}
    own_client = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    last_error = "no attempt made"
    try:
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = min(cfg.backoff_base * 2 ** (attempt - 1), 60.0)
                log.info("teacher retry %d after %.1fs (%s)", attempt, delay, last_error)
                sleep(delay)
            limiter.acquire()
            try:
                resp = client.post(cfg.endpoint_url, json=body, headers=headers)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                continue
            if not 200 <= resp.status_code < 300:
                last_error = f"HTTP {resp.status_code}"
                continue
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last_error = f"malformed response: {exc}"
                continue
    finally:
        if own_client:
            client.close()
    raise TeacherError(f"teacher request failed after {cfg.max_retries + 1} attempts: {last_error}")


_FENCE = re.compile(r"^```[\w-]*\s*$", re.MULTILINE)


def parse_response(text: str, vocab: Vocabulary, max_segments: int = 50) -> ParseResult:
    """Strip markdown fences, then parse leniently."""
    cleaned = _FENCE.sub(" ", text or "").replace("`", " ")
    return parse_text(cleaned, vocab, max_segments)


def teacher_error_rate(results: Sequence[ParseResult]) -> float:
    total = sum(r.n_segments_seen for r in results)
    dropped = sum(r.n_dropped for r in results)
    return dropped / total if total else 0.0


# --- scripted teacher -----------------------------------------------------------------

def scripted_teacher(
    dataset: Dataset | None,
    vocab: Vocabulary,
    n_sequences: int,
    segments_per_sequence: int | tuple[int, int] = (2, 5),
    rng_seed=0,
    bias: Sequence[Segment] | None = None,
    max_segment_len: int = 5,
) -> list[TransformationSequence]:
    """Offline stand-in for the teacher: random valid sequences, optionally with planted segments.

    Each sequence includes all ``bias`` segments with probability 0.5, at random positions.
    """
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    if dataset is not None and dataset.n_features != vocab.n_features:
        raise ValueError("dataset feature count does not match the vocabulary")
    rng = check_random_state(rng_seed)
    lo, hi = (segments_per_sequence, segments_per_sequence) if isinstance(segments_per_sequence, int) else segments_per_sequence
    out = []
    for _ in range(n_sequences):
        k = int(rng.integers(lo, hi + 1))
        segs = [random_valid_segment(rng, vocab, max_segment_len) for _ in range(k)]
        if bias and rng.random() < 0.5:
            for b in bias:
                segs.insert(int(rng.integers(len(segs) + 1)), b)
        out.append(TransformationSequence(tuple(segs)))
    return out


# --- corpus ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoldenExample:
    sequence: TransformationSequence
    score: float
    dataset_id: str
    source: str = "scripted"
    model: DownstreamModel = DownstreamModel()
    seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class GoldenCorpus:
    vocab: Vocabulary
    dataset_id: str
    examples: list[GoldenExample] = field(default_factory=list)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def fingerprint(self) -> str:
        return self.vocab.fingerprint

    def texts(self) -> set[str]:
        return {to_text(e.sequence) for e in self.examples}

    def add(self, example: GoldenExample) -> None:
        if example.dataset_id != self.dataset_id:
            raise ValueError(f"example is for dataset {example.dataset_id!r}, corpus for {self.dataset_id!r}")
        text = to_text(example.sequence)
        if any(to_text(e.sequence) == text for e in self.examples):
            raise DuplicateSequence(text)
        self.examples.append(example)

    @property
    def sequences(self) -> list[TransformationSequence]:
        return [e.sequence for e in self.examples]

    @property
    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.examples], dtype=float)

    def __eq__(self, other):
        return (
            isinstance(other, GoldenCorpus)
            and self.vocab == other.vocab
            and self.dataset_id == other.dataset_id
            and self.examples == other.examples
        )


def score_sequence(
    sequence: TransformationSequence,
    dataset: Dataset,
    model: DownstreamModel = DownstreamModel(),
    seed: int = 0,
    test_fraction: float = 0.2,
    policy: EvalPolicy = EvalPolicy(),
):
    """Transform the full dataset, split, fit and score. Returns (EvalResult, statuses)."""
    X, status = apply_sequence(sequence, dataset.X, policy)
    if not any(s.ok for s in status):
        raise AllSegmentsFailed("every segment failed to evaluate")
    train, test = split(dataset.with_features(X), test_fraction, seed)
    return evaluate_downstream(train, test, model, seed), status


def baseline_score(dataset: Dataset, model: DownstreamModel = DownstreamModel(), seed: int = 0,
                   test_fraction: float = 0.2) -> float:
    train, test = split(dataset, test_fraction, seed)
    return evaluate_downstream(train, test, model, seed).score


def score_and_add(
    corpus: GoldenCorpus,
    sequence: TransformationSequence,
    dataset: Dataset,
    model: DownstreamModel = DownstreamModel(),
    seed: int = 0,
    source: str = "scripted",
) -> GoldenExample:
    """Score ``sequence`` and store it.

    Segments that fail on the data (or repeat) are stripped before storage, so
    the corpus only teaches evaluable transformations.
    """
    if not len(sequence):
        raise AllSegmentsFailed("empty sequence")
    _, status = apply_sequence(sequence, dataset.X)
    kept = TransformationSequence(tuple(s for s, st in zip(sequence.segments, status) if st.ok))
    if not len(kept):
        raise AllSegmentsFailed("every segment failed to evaluate")
    if to_text(kept) in corpus.texts():
        raise DuplicateSequence(to_text(kept))
    result, _ = score_sequence(kept, dataset, model, seed)
    example = GoldenExample(kept, result.score, dataset.id, source, model, seed)
    corpus.add(example)
    return example


def corpus_save(corpus: GoldenCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in corpus.examples:
            record = {
                "tokens": to_text(e.sequence),
                "score": e.score,
                "dataset_id": e.dataset_id,
                "source": e.source,
                "model": e.model.to_dict(),
                "seed": e.seed,
                "vocab": corpus.fingerprint,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def corpus_load(path, vocab: Vocabulary, dataset_id: str | None = None) -> GoldenCorpus:
    corpus = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text, score = rec["tokens"], float(rec["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"malformed record: {exc}", lineno) from None
            if rec.get("vocab", vocab.fingerprint) != vocab.fingerprint:
                raise CorpusFormatError(
                    f"vocabulary fingerprint mismatch: file {rec['vocab']}, expected {vocab.fingerprint}", lineno
                )
            parsed = parse_text(text, vocab)
            if parsed.diagnostics or not len(parsed.sequence):
                detail = "; ".join(f"{d.kind} {d.detail}".strip() for d in parsed.diagnostics)
                raise CorpusFormatError(f"invalid sequence {text!r}: {detail}", lineno)
            if corpus is None:
                corpus = GoldenCorpus(vocab, dataset_id or rec["dataset_id"])
            try:
                example = GoldenExample(
                    parsed.sequence, score, rec["dataset_id"], rec.get("source", "scripted"),
                    DownstreamModel.from_dict(rec["model"]) if "model" in rec else DownstreamModel(),
                    int(rec.get("seed", 0)),
                )
                corpus.add(example)
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(str(exc), lineno) from None
    return corpus if corpus is not None else GoldenCorpus(vocab, dataset_id or "")


@dataclass(frozen=True)
class CorpusStats:
    simple_ops: int
    complex_ops: int
    operator_counts: dict
    feature_usage: dict
    score_min: float
    score_mean: float
    score_max: float
    n_examples: int

    @property
    def simple_ratio(self) -> float:
        total = self.simple_ops + self.complex_ops
        return self.simple_ops / total if total else 0.0


def sequence_usage(sequences, n_features: int):
    """Operator and feature occurrence counts over a collection of sequences."""
    ops = Counter()
    feats = Counter({i: 0 for i in range(n_features)})
    simple = complex_ = 0
    for seq in sequences:
        for seg in seq.segments:
            for tok in seg.tokens:
                if tok.kind == "feature":
                    feats[tok.index] += 1
                elif tok.kind == "op":
                    ops[tok.op.name] += 1
                    if tok.op.complexity_class == "simple":
                        simple += 1
                    else:
                        complex_ += 1
    return simple, complex_, dict(sorted(ops.items())), dict(sorted(feats.items()))


def corpus_stats(corpus: GoldenCorpus) -> CorpusStats:
    if not len(corpus):
        raise ValueError("corpus is empty")
    simple, complex_, ops, feats = sequence_usage(corpus.sequences, corpus.vocab.n_features)
    scores = corpus.scores
    return CorpusStats(simple, complex_, ops, feats, float(scores.min()), float(scores.mean()),
                       float(scores.max()), len(corpus))


def build_corpus(
    candidates: Sequence[TransformationSequence],
    dataset: Dataset,
    vocab: Vocabulary,
    model: DownstreamModel = DownstreamModel(),
    seed: int = 0,
    source: str = "scripted",
    limit: int | None = None,
) -> tuple[GoldenCorpus, dict]:
    """Score candidates into a fresh corpus, skipping duplicates and total failures."""
    corpus = GoldenCorpus(vocab, dataset.id)
    skipped = Counter()
    for seq in candidates:
        if limit is not None and len(corpus) >= limit:
            break
        if not len(seq):
            skipped["empty"] += 1
            continue
        try:
            score_and_add(corpus, seq, dataset, model, seed, source)
        except DuplicateSequence:
            skipped["duplicate"] += 1
        except AllSegmentsFailed:
            skipped["all_segments_failed"] += 1
    return corpus, dict(skipped)
