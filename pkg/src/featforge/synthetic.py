"""Bundled synthetic regression benchmark with a planted interaction."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .expr import Segment, feature, op

N_ROWS = 500
N_FEATURES = 5
NOISE_SD = 0.1


def planted_segment() -> Segment:
    """``f0 f1 multiply``: the product term the target is built from."""
    return Segment((feature(0), feature(1), op("multiply")))


def make_synthetic(seed: int = 0, n_rows: int = N_ROWS, noise: float = NOISE_SD) -> Dataset:
    """y = f0 * f1 + log(f2 + 3) + N(0, noise^2); features uniform on [-2, 2]."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n_rows, N_FEATURES))
    y = X[:, 0] * X[:, 1] + np.log(X[:, 2] + 3.0) + rng.normal(0.0, noise, size=n_rows)
    return Dataset(X, y, "regression", [f"f{i}" for i in range(N_FEATURES)], f"synthetic-{seed}")
