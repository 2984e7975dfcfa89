"""Run configuration: one JSON document, layered as defaults < file < command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import Dataset, DownstreamModel, load_csv
from .expr import CANONICAL_OPERATORS, Segment, Vocabulary, build_vocabulary, operators_from_names, parse_text
from .golden import ConfigError, TeacherConfig
from .search import SearchConfig
from .seq2seq import TrainConfig
from .studentlm import LMTrainConfig
from .synthetic import make_synthetic
from .teaming import TeamingConfig

SYNTHETIC = "synthetic"


def sub_seed(seed: int, name: str) -> int:
    """Deterministic 31-bit seed for a named component."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class RunConfig:
    dataset: str = SYNTHETIC  # CSV path, or "synthetic[:seed]"
    target: str = "y"
    task: str = "regression"
    operators: list = field(default_factory=lambda: [o.name for o in CANONICAL_OPERATORS])
    teacher_mode: str = "scripted"
    teacher: dict = field(default_factory=dict)
    corpus_size: int = 200
    segments_per_sequence: list = field(default_factory=lambda: [1, 3])
    max_segment_len: int = 5
    plant: list = field(default_factory=list)  # segment texts the scripted teacher favours
    model: dict = field(default_factory=dict)
    seq2seq: dict = field(default_factory=dict)
    student: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    teaming: dict = field(default_factory=dict)
    gradient_check: dict = field(default_factory=lambda: {"epsilon": 1e-5, "n_coords": 8, "n_sequences": 4,
                                                          "threshold": 1e-3})
    bench_seeds: int = 5
    output_dir: str = "featforge-out"
    seed: int = 0

    # --- layering ---------------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            if isinstance(getattr(cfg, k), dict):
                if not isinstance(v, dict):
                    raise ConfigError(f"{k} must be an object")
                setattr(cfg, k, {**getattr(cfg, k), **v})
            else:
                setattr(cfg, k, v)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"teaming.lam": 0.7}``."""
        d = copy.deepcopy(self.to_dict())
        for key, value in overrides.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"cannot override {key!r}")
                node = node[p]
            if not parents and leaf not in d:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    # --- resolution into typed component configs --------------------------------------

    def _build(self, cls, values: dict, seed_name: str | None = None, seed_field: str = "rng_seed"):
        values = dict(values)
        if seed_name is not None and seed_field not in values:
            values[seed_field] = sub_seed(self.seed, seed_name)
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"{cls.__name__}: {exc}") from exc

    def teacher_config(self) -> TeacherConfig:
        return self._build(TeacherConfig, self.teacher)

    def model_config(self) -> DownstreamModel:
        return self._build(DownstreamModel, self.model)

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig, self.seq2seq, "seq2seq")

    def lm_config(self) -> LMTrainConfig:
        return self._build(LMTrainConfig, self.student, "student")

    def search_config(self) -> SearchConfig:
        return self._build(SearchConfig, self.search, "search")

    def teaming_config(self) -> TeamingConfig:
        return self._build(TeamingConfig, self.teaming, "teaming")

    def teacher_seed(self) -> int:
        return sub_seed(self.seed, "teacher")

    def validate(self) -> "RunConfig":
        if self.teacher_mode not in ("scripted", "api"):
            raise ConfigError(f"teacher_mode must be 'scripted' or 'api', got {self.teacher_mode!r}")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.corpus_size < 1 or self.bench_seeds < 1:
            raise ConfigError("corpus_size and bench_seeds must be >= 1")
        if not self.dataset.startswith(SYNTHETIC) and not Path(self.dataset).is_file():
            raise ConfigError(f"dataset not found: {self.dataset}")
        try:
            operators_from_names(self.operators)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"operators: {exc}") from exc
        for build in (self.teacher_config, self.model_config, self.train_config, self.lm_config,
                      self.search_config, self.teaming_config):
            build()
        return self

    def load_dataset(self) -> Dataset:
        if self.dataset.startswith(SYNTHETIC):
            _, _, s = self.dataset.partition(":")
            return make_synthetic(int(s) if s else 0)
        return load_csv(self.dataset, self.target, self.task)

    def vocabulary(self, n_features: int) -> Vocabulary:
        return build_vocabulary(n_features, operators_from_names(self.operators))

    def planted_segments(self, vocab: Vocabulary) -> list[Segment]:
        out = []
        for text in self.plant:
            parsed = parse_text(text, vocab)
            if parsed.diagnostics or len(parsed.sequence) != 1:
                raise ConfigError(f"planted segment {text!r} is not a single valid segment")
            out.append(parsed.sequence.segments[0])
        return out
