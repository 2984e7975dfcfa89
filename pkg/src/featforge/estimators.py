"""scikit-learn transformers wrapping postfix sequences and the full teaming pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import seq2seq, studentlm
from .data import Dataset, DownstreamModel, factorize_labels
from .expr import (
    CANONICAL_OPERATORS,
    EvalPolicy,
    TransformationSequence,
    apply_sequence,
    build_vocabulary,
    operators_from_names,
    parse_text,
)
from .golden import build_corpus, scripted_teacher
from .search import SearchConfig
from .teaming import PolicyKind, TeamingConfig, run_policy


def check_features(X, n_features: int | None = None) -> np.ndarray:
    """2-D finite float array, optionally with a fixed column count."""
    X = check_array(X, dtype=float, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def _as_sequence(sequence, n_features) -> TransformationSequence:
    if isinstance(sequence, TransformationSequence):
        return sequence
    parsed = parse_text(str(sequence), build_vocabulary(n_features))
    if parsed.diagnostics:
        raise ValueError(f"sequence does not parse: {parsed.diagnostics[0]}")
    return parsed.sequence


class PostfixTransformer(TransformerMixin, BaseEstimator):
    """Append (or replace with) the columns produced by a fixed postfix sequence.

    ``sequence`` may be a :class:`TransformationSequence` or its text form.
    Non-finite cells are replaced with ``replace_value`` so the output width
    never depends on the data seen at transform time.
    """

    def __init__(self, sequence=None, replace_value: float = 0.0, append_mode: str = "augment_original"):
        self.sequence = sequence
        self.replace_value = replace_value
        self.append_mode = append_mode

    def _policy(self):
        return EvalPolicy("replace", self.replace_value, self.append_mode, dedup_segments=False)

    def fit(self, X, y=None):
        X = check_features(X)
        if self.sequence is None:
            raise ValueError("sequence is required")
        self.n_features_in_ = X.shape[1]
        self.sequence_ = _as_sequence(self.sequence, self.n_features_in_)
        return self

    def transform(self, X):
        check_is_fitted(self, "sequence_")
        X = check_features(X, self.n_features_in_)
        out, _ = apply_sequence(self.sequence_, X, self._policy())
        return out


class TeamingFeatureTransformer(TransformerMixin, BaseEstimator):
    """Learn a transformation sequence for (X, y) with the scripted-teacher pipeline.

    ``fit`` builds a golden corpus, trains both models and runs ``policy``;
    the winning sequence is then applied by ``transform``.
    """

    def __init__(self, task: str = "regression", operators=None, corpus_size: int = 100,
                 epochs: int = 300, policy: str = "teaming", lam: float = 0.5, eta: float = 0.05,
                 steps_per_seed: int = 10, n_seeds: int = 8, model_kind: str = "random_forest",
                 random_state: int = 0):
        self.task = task
        self.operators = operators
        self.corpus_size = corpus_size
        self.epochs = epochs
        self.policy = policy
        self.lam = lam
        self.eta = eta
        self.steps_per_seed = steps_per_seed
        self.n_seeds = n_seeds
        self.model_kind = model_kind
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = factorize_labels(y) if self.task == "classification" else np.asarray(y, dtype=float)
        ops = CANONICAL_OPERATORS if self.operators is None else operators_from_names(self.operators)
        vocab = build_vocabulary(X.shape[1], ops)
        data = Dataset(X, y, self.task)
        model = DownstreamModel(self.model_kind)
        cands = scripted_teacher(data, vocab, self.corpus_size, (1, 3), self.random_state)
        corpus, _ = build_corpus(cands, data, vocab, model, self.random_state)
        if len(corpus) < self.n_seeds:
            raise ValueError(f"only {len(corpus)} usable corpus entries for {self.n_seeds} seeds")
        ml, _ = seq2seq.train_joint(corpus, seq2seq.TrainConfig(epochs=self.epochs, rng_seed=self.random_state))
        student = None
        if PolicyKind(self.policy) in (PolicyKind.TEAMING, PolicyKind.TEAMING_WO_SEARCH):
            student, _ = studentlm.train_student(
                corpus, studentlm.LMTrainConfig(epochs=self.epochs, rng_seed=self.random_state), vocab)
        report, _ = run_policy(
            data, corpus, self.policy, ml, student,
            SearchConfig(eta=self.eta, steps_per_seed=self.steps_per_seed, n_seeds=self.n_seeds),
            TeamingConfig(lam=self.lam), model, self.random_state,
        )
        if not report.best_sequence:
            raise RuntimeError("search produced no valid sequence")
        self.n_features_in_ = X.shape[1]
        self.report_ = report
        self.sequence_ = parse_text(report.best_sequence, vocab).sequence
        return self

    def transform(self, X):
        check_is_fitted(self, "sequence_")
        X = check_features(X, self.n_features_in_)
        out, _ = apply_sequence(self.sequence_, X, EvalPolicy("replace", dedup_segments=False))
        return out
