"""Product-of-experts fusion of the ML decoder and the student LM, and the policy runner."""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import seq2seq, studentlm
from .data import Dataset, DownstreamModel
from .decoding import Decoded, decoded_from_ids, prefix_ids
from .expr import Vocabulary, check_random_state, completable_within, to_infix, to_text
from .golden import baseline_score, sequence_usage
from .search import SearchConfig, SearchResult, search

log = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-3


class FingerprintMismatch(ValueError):
    pass


class MissingArtifact(ValueError):
    pass


@dataclass(frozen=True)
class TeamingConfig:
    lam: float = 0.5
    prob_floor: float = 1e-12
    strategy: str = "greedy"  # or "top_k"
    k: int = 5
    rng_seed: int = 0
    syntactic_mask: bool = False
    max_len: int = 64

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if not self.prob_floor > 0:
            raise ValueError("prob_floor must be > 0")
        if self.strategy not in ("greedy", "top_k"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_len < 3:
            raise ValueError("max_len must be >= 3")

    def to_dict(self) -> dict:
        return asdict(self)


def combine(p_ml, p_llm, lam: float, prob_floor: float = 1e-12) -> np.ndarray:
    """Weighted geometric mean ``p_ml^lam * p_llm^(1-lam)``, renormalised.

    Computed in log space; probabilities below ``prob_floor`` are raised to it.
    """
    p_ml = np.asarray(p_ml, dtype=float)
    p_llm = np.asarray(p_llm, dtype=float)
    if p_ml.shape != p_llm.shape:
        raise ValueError(f"distribution sizes differ: {p_ml.shape} vs {p_llm.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    logq = lam * np.log(np.maximum(p_ml, prob_floor)) + (1.0 - lam) * np.log(np.maximum(p_llm, prob_floor))
    q = np.exp(logq - logq.max())
    return q / q.sum()


# --- syntactic mask ---------------------------------------------------------------------

def _segment_state(ids: list[int], vocab: Vocabulary) -> tuple[int, bool]:
    """Stack depth and has-operator flag of the open segment at the end of ``ids``."""
    depth, has_op = 0, False
    for i in ids[1:]:
        if i == vocab.sep_id:
            depth, has_op = 0, False
            continue
        tok = vocab.token(i)
        if tok.kind == "feature":
            depth += 1
        elif tok.kind == "op":
            depth += 1 - tok.op.arity
            has_op = True
    return depth, has_op


def syntactic_mask(prefix, vocab: Vocabulary, remaining: int | None = None) -> np.ndarray:
    """Boolean vector of tokens that keep the stream parseable.

    ``remaining`` is how many tokens may still be emitted (EOS included); when
    given, tokens whose segment could not be closed in time are excluded too.
    """
    ids = prefix_ids(vocab, prefix)
    if vocab.eos_id in ids[1:]:
        raise ValueError("prefix already terminated")
    depth, has_op = _segment_state(ids, vocab)
    budget = float("inf") if remaining is None else remaining
    if budget < 1:
        raise ValueError("no tokens remaining")

    def fits(d, op, extra):
        # after this token: close the segment within budget - 1 - extra, then EOS
        if remaining is None:
            return True
        return completable_within(d, op, int(budget) - 2 - extra, vocab)

    allowed = np.zeros(vocab.size, dtype=bool)
    if fits(depth + 1, has_op, 0):
        allowed[list(vocab.feature_ids)] = True
    if depth >= 1 and fits(depth, True, 0):
        allowed[list(vocab.unary_ids)] = True
    if depth >= 2 and fits(depth - 1, True, 0):
        allowed[list(vocab.binary_ids)] = True
    if depth == 1 and has_op:
        allowed[vocab.eos_id] = True
        # a new segment needs at least two tokens plus the closing EOS
        if remaining is None or completable_within(0, False, int(budget) - 2, vocab):
            allowed[vocab.sep_id] = True
    return allowed


def apply_mask(q: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    if not allowed.any():
        raise ValueError("syntactic mask admits no token")
    q = np.where(allowed, q, 0.0)
    total = q.sum()
    if total <= 0:
        # every admissible token underflowed: fall back to uniform over the admissible set
        return allowed / allowed.sum()
    return q / total


# --- teamed decoding -----------------------------------------------------------------------

def _pick(q, cfg: TeamingConfig, rng) -> int:
    if cfg.strategy == "greedy":
        return int(np.argmax(q))
    top = np.argsort(-q, kind="stable")[: cfg.k]
    w = q[top] / q[top].sum()
    return int(top[rng.choice(len(top), p=w)])


def team_decode(ml: seq2seq.Seq2SeqParams, student: studentlm.StudentParams | None, z,
                config: TeamingConfig = TeamingConfig(), rng=None) -> Decoded:
    """Decode ``z`` token by token from the fused distributions.

    ``student`` may be None only when ``lam == 1`` (ML-only decoding).
    """
    vocab = ml.vocab
    if student is not None and student.vocab.fingerprint != vocab.fingerprint:
        raise FingerprintMismatch(f"{vocab.fingerprint} != {student.vocab.fingerprint}")
    if student is None and config.lam != 1.0:
        raise MissingArtifact("student model required when lambda < 1")
    rng = check_random_state(config.rng_seed if rng is None else rng)
    ml_state = seq2seq.decoder_init(ml, z)
    lm_state = studentlm.lm_init(student) if student is not None else None
    token = vocab.sos_id
    prefix, raw, dists = [token], [], []
    while len(raw) < config.max_len:
        ml_state, p_ml = seq2seq.decoder_advance(ml, ml_state, token)
        if student is not None:
            lm_state, p_llm = studentlm.lm_advance(student, lm_state, token)
            q = combine(p_ml, p_llm, config.lam, config.prob_floor)
        else:
            q = combine(p_ml, p_ml, 1.0, config.prob_floor)
        if config.syntactic_mask:
            q = apply_mask(q, syntactic_mask(prefix, vocab, config.max_len - len(raw)))
        token = _pick(q, config, rng)
        raw.append(token)
        prefix.append(token)
        dists.append(q)
        if token == vocab.eos_id:
            break
    return decoded_from_ids(raw, vocab, np.array(dists))


# --- policies ------------------------------------------------------------------------------

class PolicyKind(str, enum.Enum):
    TRADITIONAL_ML = "traditional_ml"
    TEAMING_WO_SEARCH = "teaming_wo_search"
    WO_DECODER_TEAMING = "wo_decoder_teaming"
    TEAMING = "teaming"


POLICIES = tuple(PolicyKind)


@dataclass
class RunReport:
    policy: str
    best_sequence: str
    best_infix: list[str]
    score: float
    metric: str
    original_score: float
    error_rate: float
    segment_error_rate: float
    n_candidates: int
    n_invalid: int
    operator_ratio: dict
    feature_usage: dict
    n_epochs: int
    epochs_to_converge: int
    best_so_far: list[float]
    config: dict
    timing: dict = field(default_factory=dict)  # wall clock; kept out of to_json

    def __post_init__(self):
        if not 0.0 <= self.error_rate <= 1.0:
            raise ValueError("error_rate outside [0, 1]")

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("timing")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def markdown_cell(self) -> str:
        return f"{self.score:.4f} ({100 * self.error_rate:.1f}%)"

    def markdown_row(self) -> str:
        return f"| {self.policy} | {self.markdown_cell()} |"


def epochs_to_converge(curve: list[float], tol: float = CONVERGENCE_TOL) -> int:
    """First epoch whose best-so-far score is within ``tol`` of the final best."""
    finite = [c for c in curve if np.isfinite(c)]
    if not finite:
        return len(curve)
    final = curve[-1]
    for k, c in enumerate(curve):
        if np.isfinite(c) and c >= final - tol:
            return k
    return len(curve) - 1


def _operator_ratio(sequences, n_features) -> tuple[dict, dict]:
    simple, complex_, ops, feats = sequence_usage(sequences, n_features)
    total = simple + complex_
    ratio = {"simple": simple, "complex": complex_,
             "simple_fraction": simple / total if total else 0.0, "counts": ops}
    return ratio, {f"f{i}": n for i, n in feats.items()}


def run_policy(
    dataset: Dataset,
    corpus,
    policy: PolicyKind | str,
    ml_params: seq2seq.Seq2SeqParams | None,
    student_params: studentlm.StudentParams | None = None,
    search_config: SearchConfig = SearchConfig(),
    teaming_config: TeamingConfig = TeamingConfig(),
    model: DownstreamModel = DownstreamModel(),
    eval_seed: int = 0,
) -> tuple[RunReport, SearchResult]:
    """Run one ablation arm end to end.

    traditional_ml and wo_decoder_teaming search with ML-only greedy decoding;
    teaming_wo_search team-decodes the seeds without moving them; teaming
    searches and team-decodes every trajectory point.
    """
    policy = PolicyKind(policy)
    if ml_params is None:
        raise MissingArtifact("trained seq2seq parameters are required")
    teamed = policy in (PolicyKind.TEAMING, PolicyKind.TEAMING_WO_SEARCH)
    if teamed and student_params is None:
        raise MissingArtifact(f"policy {policy.value} requires a trained student model")
    scfg = search_config
    if policy is PolicyKind.TEAMING_WO_SEARCH:
        scfg = SearchConfig(**{**scfg.to_dict(), "steps_per_seed": 0})
    if teamed:
        tcfg = teaming_config
        rng = check_random_state(tcfg.rng_seed)

        def decoder(z):
            return team_decode(ml_params, student_params, z, tcfg, rng)
    else:
        tcfg = TeamingConfig(**{**teaming_config.to_dict(), "lam": 1.0})

        def decoder(z):
            return seq2seq.decode_greedy(ml_params, z, tcfg.max_len)

    t0 = time.perf_counter()
    result = search(ml_params, corpus, dataset, model, scfg, decoder, eval_seed)
    elapsed = time.perf_counter() - t0

    best = result.best
    valid_seqs = [c.sequence for c in result.candidates if c.valid]
    ratio, usage = _operator_ratio(valid_seqs, dataset.n_features)
    n_invalid = sum(not c.valid for c in result.candidates)
    has_best = best is not None and best.valid
    report = RunReport(
        policy=policy.value,
        best_sequence=to_text(best.sequence) if has_best else "",
        best_infix=[to_infix(s) for s in best.sequence.segments] if has_best else [],
        score=best.score if has_best else float("nan"),
        metric=best.actual.metric if has_best else "",
        original_score=baseline_score(dataset, model, eval_seed),
        error_rate=result.error_rate,
        segment_error_rate=result.segment_error_rate,
        n_candidates=len(result.candidates),
        n_invalid=n_invalid,
        operator_ratio=ratio,
        feature_usage=usage,
        n_epochs=len(result.best_so_far),
        epochs_to_converge=epochs_to_converge(result.best_so_far),
        best_so_far=result.best_so_far,
        config={
            "search": scfg.to_dict(),
            "teaming": tcfg.to_dict(),
            "model": model.to_dict(),
            "eval_seed": eval_seed,
            "vocab_fingerprint": ml_params.vocab.fingerprint,
        },
        timing={"seconds": elapsed, "seconds_per_epoch": elapsed / max(len(result.best_so_far), 1)},
    )
    return report, result
