"""Tabular datasets, downstream models and the two scoring metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.model_selection import train_test_split
from sklearn.neighbors import KNeighborsClassifier, KNeighborsRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

TASKS = ("classification", "regression")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray  # (n_samples, n_features)
    y: np.ndarray
    task: str
    feature_names: list[str] = field(default_factory=list)
    id: str = "dataset"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise DatasetError("X must be 2-D")
        if self.task not in TASKS:
            raise DatasetError(f"task must be one of {TASKS}, got {self.task!r}")
        self.y = np.asarray(self.y, dtype=int if self.task == "classification" else float)
        if len(self.y) != len(self.X):
            raise DatasetError(f"X has {len(self.X)} rows but y has {len(self.y)}")
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("X contains non-finite values")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.X.shape[1])]

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])

    def with_features(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.y, self.task, [], self.id)


def factorize_labels(values) -> np.ndarray:
    codes, _ = pd.factorize(pd.Series(values), sort=True)
    return codes.astype(int)


def load_csv(path, target, task: str, *, impute: str = "median", dataset_id: str | None = None) -> Dataset:
    """Read a headered CSV; non-numeric or non-finite feature cells are imputed.

    ``target`` is a column name or integer index.
    """
    path = Path(path)
    if task not in TASKS:
        raise DatasetError(f"task must be one of {TASKS}")
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"{path}: empty file") from None
    if frame.empty:
        raise DatasetError(f"{path}: no data rows")
    if isinstance(target, int):
        if not 0 <= target < frame.shape[1]:
            raise DatasetError(f"missing target: column index {target}")
        target = frame.columns[target]
    if target not in frame.columns:
        raise DatasetError(f"missing target: column {target!r}")

    y_raw = frame.pop(target)
    if y_raw.isna().any():
        keep = ~y_raw.isna()
        frame, y_raw = frame[keep], y_raw[keep]
    if y_raw.nunique() < 2:
        raise DatasetError("target column is constant")
    if task == "classification":
        y = factorize_labels(y_raw)
    else:
        y = pd.to_numeric(y_raw, errors="coerce").to_numpy(dtype=float)
        if not np.all(np.isfinite(y)):
            raise DatasetError("regression target has non-numeric or non-finite values")

    X = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    X[~np.isfinite(X)] = np.nan
    if impute != "median":
        raise DatasetError(f"unsupported imputation {impute!r}")
    medians = np.array([np.nanmedian(c) if np.isfinite(c).any() else 0.0 for c in X.T])
    rows, cols = np.where(np.isnan(X))
    X[rows, cols] = np.take(medians, cols)
    return Dataset(X, y, task, [str(c) for c in frame.columns], dataset_id or path.stem)


def split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0, stratify: bool | None = None):
    """Deterministic train/test split; stratified by default for classification."""
    if not 0 < test_fraction < 1:
        raise DatasetError("test_fraction must be in (0, 1)")
    if stratify is None:
        stratify = dataset.task == "classification"
    labels = None
    if stratify:
        labels = dataset.y
        counts = np.bincount(labels.astype(int))
        if (counts[counts > 0] < 2).any():
            raise DatasetError("stratified split needs at least 2 members per class")
    idx = np.arange(dataset.n_samples)
    train_idx, test_idx = train_test_split(
        idx, test_size=test_fraction, random_state=seed, stratify=labels
    )
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


# --- metrics ----------------------------------------------------------------

def f1_macro(pred_labels, true_labels) -> float:
    """Macro F1 over the classes present in ``true_labels``."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if true.size == 0:
        raise ValueError("empty label arrays")
    scores = []
    for c in np.unique(true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def one_minus_rae(pred, truth) -> float:
    """1 - sum|pred - truth| / sum|truth - mean(truth)|, unclipped."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    denom = np.sum(np.abs(truth - truth.mean()))
    if denom == 0:
        raise ValueError("truth is constant; relative absolute error undefined")
    return float(1.0 - np.sum(np.abs(pred - truth)) / denom)


# --- downstream models ----------------------------------------------------------

MODEL_KINDS = ("random_forest", "decision_tree", "linear", "knn")


@dataclass(frozen=True)
class DownstreamModel:
    kind: str = "random_forest"
    n_trees: int = 10
    max_depth: int = 8
    l2_penalty: float = 1.0
    k: int = 5
    max_features: str | float | None = "default"
    bootstrap: bool = True

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if min(self.n_trees, self.max_depth, self.k) <= 0 or self.l2_penalty <= 0:
            raise ValueError("model hyperparameters must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DownstreamModel":
        return cls(**d)

    def make_estimator(self, task: str, seed: int):
        clf = task == "classification"
        if self.kind == "random_forest":
            cls = RandomForestClassifier if clf else RandomForestRegressor
            kw = {} if self.max_features == "default" else {"max_features": self.max_features}
            return cls(
                n_estimators=self.n_trees, max_depth=self.max_depth, bootstrap=self.bootstrap,
                random_state=seed, n_jobs=1, **kw,
            )
        if self.kind == "decision_tree":
            cls = DecisionTreeClassifier if clf else DecisionTreeRegressor
            return cls(max_depth=self.max_depth, random_state=seed)
        if self.kind == "linear":
            est = (
                LogisticRegression(C=1.0 / self.l2_penalty, max_iter=1000)
                if clf else Ridge(alpha=self.l2_penalty)
            )
            return make_pipeline(StandardScaler(), est)
        cls = KNeighborsClassifier if clf else KNeighborsRegressor
        return make_pipeline(StandardScaler(), cls(n_neighbors=self.k))


@dataclass(frozen=True)
class EvalResult:
    score: float
    metric: str
    model: DownstreamModel
    seed: int


def metric_name(task: str) -> str:
    return "f1_macro" if task == "classification" else "one_minus_rae"


def evaluate_downstream(train: Dataset, test: Dataset, model: DownstreamModel = DownstreamModel(), seed: int = 0) -> EvalResult:
    if train.task != test.task:
        raise DatasetError("train and test tasks differ")
    if train.n_features != test.n_features:
        raise DatasetError("train and test column counts differ")
    if train.n_samples == 0:
        raise DatasetError("empty training set")
    if train.task == "classification" and np.unique(train.y).size < 2:
        raise DatasetError("training set has a single class")
    est = model.make_estimator(train.task, seed)
    est.fit(train.X, train.y)
    pred = est.predict(test.X)
    if train.task == "classification":
        score = f1_macro(pred, test.y)
    else:
        score = one_minus_rae(pred, test.y)
    return EvalResult(score, metric_name(train.task), model, seed)
