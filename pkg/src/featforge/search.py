"""Gradient ascent in the encoder's latent space, with decode and real re-evaluation.

The evaluator is anything exposing ``estimate(z) -> float`` and
``grad_score(z) -> ndarray``; trained :class:`~featforge.seq2seq.Seq2SeqParams`
qualify, and so do the small fixtures below.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import seq2seq
from .data import Dataset, DownstreamModel, EvalResult
from .decoding import Decoded
from .expr import AllSegmentsFailed, to_text
from .golden import score_sequence

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-6
PATIENCE = 3


@dataclass(frozen=True)
class SearchConfig:
    eta: float = 0.05
    steps_per_seed: int = 10
    n_seeds: int = 8
    max_decode_len: int = 64
    keep_top: int = 10
    rng_seed: int = 0
    early_stop: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        # 0 steps is the no-search arm: seeds are decoded and re-ranked only
        if self.steps_per_seed < 0:
            raise ValueError("steps_per_seed must be >= 0")
        if self.n_seeds < 1 or self.keep_top < 1:
            raise ValueError("n_seeds and keep_top must be >= 1")
        if self.max_decode_len < 3:
            raise ValueError("max_decode_len must be >= 3")

    def to_dict(self) -> dict:
        return asdict(self)


# --- fixtures with closed-form gradients ----------------------------------------------

@dataclass(frozen=True)
class LinearEvaluator:
    """s(z) = w . z"""

    w: np.ndarray

    def estimate(self, z) -> float:
        return float(np.dot(self.w, z))

    def grad_score(self, z) -> np.ndarray:
        _check_dim(self.w.shape[0], z)
        return np.array(self.w, dtype=float)


@dataclass(frozen=True)
class QuadraticEvaluator:
    """s(z) = -||z - z*||^2; gradient Lipschitz constant 2."""

    center: np.ndarray

    def estimate(self, z) -> float:
        d = np.asarray(z, dtype=float) - self.center
        return float(-np.dot(d, d))

    def grad_score(self, z) -> np.ndarray:
        _check_dim(self.center.shape[0], z)
        return -2.0 * (np.asarray(z, dtype=float) - self.center)


def _check_dim(d, z):
    if np.shape(z)[-1] != d:
        raise ValueError(f"latent dimension {np.shape(z)[-1]} != {d}")


# --- primitives -------------------------------------------------------------------------

def select_seeds(params: seq2seq.Seq2SeqParams, corpus, n_seeds: int) -> tuple[list[int], np.ndarray]:
    """Indices and embeddings of the ``n_seeds`` best corpus entries.

    Ties go to the earlier corpus position (stable sort).
    """
    seqs, scores = _corpus_pairs(corpus)
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    if len(seqs) < n_seeds:
        raise ValueError(f"corpus has {len(seqs)} entries, {n_seeds} seeds requested")
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")[:n_seeds]
    idx = [int(i) for i in order]
    return idx, seq2seq.encode_many(params, [seqs[i] for i in idx])


def _corpus_pairs(corpus):
    if hasattr(corpus, "sequences") and hasattr(corpus, "scores"):
        return list(corpus.sequences), list(corpus.scores)
    pairs = list(corpus)
    return [p[0] for p in pairs], [float(p[1]) for p in pairs]


def grad_score(evaluator, z) -> np.ndarray:
    return np.asarray(evaluator.grad_score(z), dtype=float)


@dataclass
class Trajectory:
    points: list[np.ndarray]
    predicted: list[float]
    stopped: str | None = None  # "non_finite" or "no_improvement"


def ascend(evaluator, z0, eta: float, steps: int, patience: int | None = None) -> Trajectory:
    """Iterate ``z <- z + eta * grad`` from ``z0``.

    A non-finite step truncates the trajectory. With ``patience`` set, the ascent
    also stops once the predicted score has failed to rise by ``IMPROVEMENT_TOL``
    for that many consecutive steps.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if eta < 0:
        raise ValueError("eta must be >= 0")
    z = np.array(z0, dtype=float)
    traj = Trajectory([z.copy()], [evaluator.estimate(z)])
    stale = 0
    for _ in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            z = z + eta * grad_score(evaluator, z)
        s = evaluator.estimate(z) if np.all(np.isfinite(z)) else float("nan")
        if not (np.all(np.isfinite(z)) and np.isfinite(s)):
            traj.stopped = "non_finite"
            log.warning("latent ascent diverged after %d steps", len(traj.points) - 1)
            break
        stale = stale + 1 if s - max(traj.predicted) < IMPROVEMENT_TOL else 0
        traj.points.append(z.copy())
        traj.predicted.append(s)
        if patience is not None and stale >= patience:
            traj.stopped = "no_improvement"
            break
    return traj


# --- full search --------------------------------------------------------------------------

@dataclass
class SearchCandidate:
    z: np.ndarray
    predicted: float
    decoded: Decoded
    actual: EvalResult | None
    seed_index: int
    step: int
    valid: bool
    n_segments: int
    n_invalid_segments: int
    reason: str = ""

    @property
    def provenance(self) -> tuple[int, int]:
        return self.seed_index, self.step

    @property
    def sequence(self):
        return self.decoded.sequence

    @property
    def score(self) -> float:
        return self.actual.score if self.actual is not None else float("-inf")

    def canonical_text(self, vocab) -> str:
        return self.decoded.text(vocab)


@dataclass
class SearchResult:
    ranked: list[SearchCandidate]
    candidates: list[SearchCandidate]
    seed_indices: list[int]
    best_so_far: list[float]  # per epoch; epoch k = step k across all seeds
    n_evaluations: int
    config: SearchConfig
    trace: list[dict] = field(default_factory=list)

    @property
    def best(self) -> SearchCandidate | None:
        return self.ranked[0] if self.ranked else None

    @property
    def error_rate(self) -> float:
        return sum(not c.valid for c in self.candidates) / len(self.candidates)

    @property
    def segment_error_rate(self) -> float:
        total = sum(c.n_segments for c in self.candidates)
        return sum(c.n_invalid_segments for c in self.candidates) / total if total else 0.0


def rank_key(c: SearchCandidate):
    # valid first, then by actual score, then by provenance for determinism
    return (not c.valid, -c.score, c.seed_index, c.step)


def _evaluate(decoded: Decoded, dataset, model, eval_seed, cache):
    """(EvalResult|None, n_failed_segments, reason); cached by raw stream text."""
    key = decoded.raw_ids
    if key in cache:
        return cache[key]
    seq = decoded.sequence
    if not len(seq):
        out = (None, 0, "empty")
    else:
        try:
            result, status = score_sequence(seq, dataset, model, eval_seed)
            failed = sum(s.state == "error" for s in status)
            out = (result, failed, "domain_error" if failed else "")
        except AllSegmentsFailed:
            out = (None, len(seq), "all_segments_failed")
    cache[key] = out
    return out


def search(
    params: seq2seq.Seq2SeqParams,
    corpus,
    dataset: Dataset,
    model: DownstreamModel = DownstreamModel(),
    config: SearchConfig = SearchConfig(),
    decoder: Callable[[np.ndarray], Decoded] | None = None,
    eval_seed: int = 0,
    evaluator=None,
) -> SearchResult:
    """Ascend from each seed, decode every trajectory point and score it on ``dataset``.

    ``decoder`` maps a latent vector to a :class:`Decoded`; the default is the
    plain greedy decoder of ``params``. ``evaluator`` defaults to ``params``.
    """
    vocab = params.vocab
    evaluator = evaluator if evaluator is not None else params
    if decoder is None:
        def decoder(z):
            return seq2seq.decode_greedy(params, z, config.max_decode_len)
    seed_idx, Z0 = select_seeds(params, corpus, config.n_seeds)
    cache: dict = {}
    candidates: list[SearchCandidate] = []
    trace = []
    for si, z0 in zip(seed_idx, Z0):
        if config.steps_per_seed:
            traj = ascend(evaluator, z0, config.eta, config.steps_per_seed,
                          PATIENCE if config.early_stop else None)
        else:
            traj = Trajectory([np.array(z0, dtype=float)], [evaluator.estimate(z0)])
        for step, (z, pred) in enumerate(zip(traj.points, traj.predicted)):
            dec = decoder(z)
            result, failed, reason = _evaluate(dec, dataset, model, eval_seed, cache)
            if not dec.valid:
                reason = "unterminated" if not dec.terminated else (reason or "invalid_segment")
            valid = dec.valid and result is not None and failed == 0
            cand = SearchCandidate(z, float(pred), dec, result, si, step, valid,
                                   dec.n_segments, dec.n_invalid_segments + failed, reason)
            candidates.append(cand)
            trace.append({
                "seed": si, "step": step, "predicted": cand.predicted,
                "actual": "" if result is None else result.score, "valid": int(valid),
                "canonical_text": dec.text(vocab),
            })
    ranked = sorted(candidates, key=rank_key)
    n_epochs = max(c.step for c in candidates) + 1
    curve, best = [], float("-inf")
    for k in range(n_epochs):
        for c in candidates:
            if c.step == k and c.valid:
                best = max(best, c.score)
        curve.append(best)
    return SearchResult(ranked[: config.keep_top], candidates, seed_idx, curve, len(cache), config, trace)


def write_trace(result: SearchResult, path) -> None:
    fields = ["seed", "step", "predicted", "actual", "valid", "canonical_text"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in result.trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
