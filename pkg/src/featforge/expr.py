"""Postfix feature-transformation algebra.

Tokens, vocabularies, segment validation, evaluation over tabular data and
the canonical text form (``f0 f1 add token_sep f2 log``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

SEP_TEXT = "token_sep"
SOS_TEXT = "<SOS>"
EOS_TEXT = "<EOS>"

SIMPLE_OPERATORS = frozenset({"add", "subtract", "multiply", "divide"})


@dataclass(frozen=True)
class Operator:
    name: str
    arity: int

    def __post_init__(self):
        if self.arity not in (1, 2):
            raise ValueError(f"operator {self.name!r}: arity must be 1 or 2, got {self.arity}")

    @property
    def complexity_class(self) -> str:
        return "simple" if self.name in SIMPLE_OPERATORS else "complex"


UNARY_NAMES = ("square", "sqrt", "log", "exp", "sin", "cos", "tanh", "reciprocal")
BINARY_NAMES = ("add", "subtract", "multiply", "divide")

CANONICAL_OPERATORS = tuple(Operator(n, 1) for n in UNARY_NAMES) + tuple(
    Operator(n, 2) for n in BINARY_NAMES
)
OPERATORS_BY_NAME = {op.name: op for op in CANONICAL_OPERATORS}


def operators_from_names(names: Iterable[str]) -> tuple[Operator, ...]:
    out = []
    for name in names:
        if name not in OPERATORS_BY_NAME:
            raise ValueError(f"unknown operator {name!r}")
        out.append(OPERATORS_BY_NAME[name])
    return tuple(out)


@dataclass(frozen=True)
class Token:
    """One vocabulary symbol.

    ``kind`` is one of ``feature``, ``op``, ``sos``, ``sep``, ``eos``. For
    features ``index`` holds the 0-based column, for operators ``op`` is set.
    """

    kind: str
    index: int = -1
    op: Operator | None = None

    @property
    def is_special(self) -> bool:
        return self.kind in ("sos", "sep", "eos")

    @property
    def text(self) -> str:
        if self.kind == "feature":
            return f"f{self.index}"
        if self.kind == "op":
            return self.op.name
        return {"sos": SOS_TEXT, "sep": SEP_TEXT, "eos": EOS_TEXT}[self.kind]

    def __repr__(self):
        return self.text


def feature(index: int) -> Token:
    return Token("feature", index=index)


def op(name_or_op: str | Operator) -> Token:
    if isinstance(name_or_op, str):
        name_or_op = OPERATORS_BY_NAME[name_or_op]
    return Token("op", op=name_or_op)


SOS = Token("sos")
SEP = Token("sep")
EOS = Token("eos")


class Vocabulary:
    """Bijection between tokens and contiguous integer ids.

    Order: features ascending, then operators as given, then SOS, SEP, EOS.
    """

    def __init__(self, n_features: int, operators: Sequence[Operator]):
        if n_features < 1:
            raise ValueError("n_features must be >= 1")
        operators = tuple(operators)
        if not operators:
            raise ValueError("operator set must not be empty")
        names = [o.name for o in operators]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate operator names in {names}")
        self.n_features = int(n_features)
        self.operators = operators
        self.tokens: tuple[Token, ...] = (
            tuple(feature(i) for i in range(n_features))
            + tuple(op(o) for o in operators)
            + (SOS, SEP, EOS)
        )
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self._by_text = {t.text: t for t in self.tokens}
        self.sos_id = self._ids[SOS]
        self.sep_id = self._ids[SEP]
        self.eos_id = self._ids[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __repr__(self):
        return f"Vocabulary(n_features={self.n_features}, operators={[o.name for o in self.operators]})"

    def id(self, token: Token) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def token(self, i: int) -> Token:
        if not 0 <= i < len(self.tokens):
            raise KeyError(f"token id {i} out of range")
        return self.tokens[i]

    def lookup(self, word: str) -> Token | None:
        return self._by_text.get(word)

    @property
    def fingerprint(self) -> str:
        text = "\n".join(t.text + (f"/{t.op.arity}" if t.op else "") for t in self.tokens)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def unary_ids(self) -> list[int]:
        return [self._ids[t] for t in self.tokens if t.kind == "op" and t.op.arity == 1]

    @property
    def binary_ids(self) -> list[int]:
        return [self._ids[t] for t in self.tokens if t.kind == "op" and t.op.arity == 2]

    @property
    def feature_ids(self) -> list[int]:
        return list(range(self.n_features))

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "operators": [o.name for o in self.operators]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["n_features"], operators_from_names(d["operators"]))


def build_vocabulary(n_features: int, operators: Sequence[Operator] = CANONICAL_OPERATORS) -> Vocabulary:
    return Vocabulary(n_features, operators)


@dataclass(frozen=True)
class Segment:
    tokens: tuple[Token, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(t.text for t in self.tokens)

    def __repr__(self):
        return f"Segment({self.text})"


@dataclass(frozen=True)
class TransformationSequence:
    segments: tuple[Segment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def wire_tokens(self) -> list[Token]:
        out = [SOS]
        for i, seg in enumerate(self.segments):
            if i:
                out.append(SEP)
            out.extend(seg.tokens)
        out.append(EOS)
        return out

    def wire_ids(self, vocab: Vocabulary) -> list[int]:
        return [vocab.id(t) for t in self.wire_tokens()]

    @property
    def text(self) -> str:
        return to_text(self)

    def __repr__(self):
        return f"TransformationSequence({self.text!r})"


def make_sequence(*segments: Sequence[Token]) -> TransformationSequence:
    return TransformationSequence(tuple(Segment(tuple(s)) for s in segments))


# --- validation -------------------------------------------------------------

@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    kind: str | None = None
    position: int | None = None

    def __bool__(self):
        return self.ok


VALID = ValidationResult(True)


def validate_segment(tokens: Sequence[Token]) -> ValidationResult:
    """Check postfix stack discipline.

    Error kinds: ``empty``, ``underflow`` (position of the offending operator),
    ``no_operator``, ``no_feature``, ``leftover_operands``. End-of-input errors
    report ``position = len(tokens)``.
    """
    tokens = tuple(tokens)
    if not tokens:
        return ValidationResult(False, "empty", 0)
    depth = 0
    n_ops = n_feat = 0
    for pos, tok in enumerate(tokens):
        if tok.is_special:
            raise ValueError(f"special token {tok!r} inside a segment")
        if tok.kind == "feature":
            depth += 1
            n_feat += 1
        else:
            need = tok.op.arity
            if depth < need:
                return ValidationResult(False, "underflow", pos)
            depth -= need - 1
            n_ops += 1
    end = len(tokens)
    if n_ops == 0:
        return ValidationResult(False, "no_operator", end)
    if n_feat == 0:
        return ValidationResult(False, "no_feature", end)
    if depth != 1:
        return ValidationResult(False, "leftover_operands", end)
    return VALID


def validate_sequence(seq: TransformationSequence) -> list[ValidationResult]:
    return [validate_segment(s.tokens) for s in seq.segments]


# --- evaluation ---------------------------------------------------------------

class DomainError(ArithmeticError):
    def __init__(self, kind: str, segment_index: int | None = None, position: int | None = None):
        self.kind = kind
        self.segment_index = segment_index
        self.position = position
        super().__init__(f"{kind} (segment {segment_index}, position {position})")

    def __eq__(self, other):
        return (
            isinstance(other, DomainError)
            and (self.kind, self.segment_index, self.position)
            == (other.kind, other.segment_index, other.position)
        )

    def __hash__(self):
        return hash((self.kind, self.segment_index, self.position))


class AllSegmentsFailed(ValueError):
    pass


# sklearn's tree learners cast to float32, so anything beyond its range counts as overflow
MAX_MAGNITUDE = float(np.finfo(np.float32).max)


def _apply_unary(name: str, a: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, str]:
    # returns (value, bad-row mask or None, error kind)
    if name == "square":
        return a * a, None, "overflow"
    if name == "sqrt":
        bad = a < 0
        return np.sqrt(np.where(bad, 0.0, a)), bad, "sqrt_negative"
    if name == "log":
        bad = a <= 0
        return np.log(np.where(bad, 1.0, a)), bad, "log_nonpositive"
    if name == "exp":
        return np.exp(a), None, "overflow"
    if name == "sin":
        return np.sin(a), None, "overflow"
    if name == "cos":
        return np.cos(a), None, "overflow"
    if name == "tanh":
        return np.tanh(a), None, "overflow"
    if name == "reciprocal":
        bad = a == 0
        return 1.0 / np.where(bad, 1.0, a), bad, "division_by_zero"
    raise ValueError(f"unknown unary operator {name!r}")


def _apply_binary(name: str, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, str]:
    if name == "add":
        return a + b, None, "overflow"
    if name == "subtract":
        return a - b, None, "overflow"
    if name == "multiply":
        return a * b, None, "overflow"
    if name == "divide":
        bad = b == 0
        return a / np.where(bad, 1.0, b), bad, "division_by_zero"
    raise ValueError(f"unknown binary operator {name!r}")


def evaluate_segment(
    segment: Segment | Sequence[Token],
    data: np.ndarray,
    *,
    segment_index: int | None = None,
    replace_with: float | None = None,
) -> np.ndarray:
    """Evaluate one postfix segment over ``data`` of shape (n_samples, n_features).

    Strict by default: any undefined or non-finite intermediate raises
    :class:`DomainError`. With ``replace_with`` set, offending rows are
    overwritten with that value instead.
    """
    tokens = segment.tokens if isinstance(segment, Segment) else tuple(segment)
    check = validate_segment(tokens)
    if not check:
        raise ValueError(f"invalid segment: {check.kind} at {check.position}")
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError("data must be 2-D (n_samples, n_features)")
    if replace_with is not None and not np.isfinite(replace_with):
        raise ValueError("replace_with must be finite")

    stack: list[np.ndarray] = []
    with np.errstate(all="ignore"):
        for pos, tok in enumerate(tokens):
            if tok.kind == "feature":
                if tok.index >= data.shape[1]:
                    raise IndexError(f"feature f{tok.index} out of range for {data.shape[1]} columns")
                stack.append(data[:, tok.index])
                continue
            if tok.op.arity == 1:
                value, bad, kind = _apply_unary(tok.op.name, stack.pop())
            else:
                b = stack.pop()
                a = stack.pop()
                value, bad, kind = _apply_binary(tok.op.name, a, b)
            nonfinite = ~(np.abs(value) <= MAX_MAGNITUDE)
            if replace_with is None:
                if bad is not None and bad.any():
                    raise DomainError(kind, segment_index, pos)
                if nonfinite.any():
                    raise DomainError("overflow", segment_index, pos)
            else:
                mask = nonfinite if bad is None else (bad | nonfinite)
                if mask.any():
                    value = np.where(mask, replace_with, value)
            stack.append(value)
    return np.array(stack[0], dtype=float)


@dataclass(frozen=True)
class EvalPolicy:
    nan_policy: str = "error"  # "error" or "replace"
    replace_value: float = 0.0
    append_mode: str = "augment_original"  # or "replace_original"
    dedup_segments: bool = True

    def __post_init__(self):
        if self.nan_policy not in ("error", "replace"):
            raise ValueError(f"nan_policy must be 'error' or 'replace', got {self.nan_policy!r}")
        if self.append_mode not in ("augment_original", "replace_original"):
            raise ValueError(f"unknown append_mode {self.append_mode!r}")
        if not np.isfinite(self.replace_value):
            raise ValueError("replace_value must be finite")


@dataclass(frozen=True)
class SegmentStatus:
    state: str  # "ok", "error", "duplicate"
    error: DomainError | None = None

    @property
    def ok(self) -> bool:
        return self.state == "ok"


def apply_sequence(
    seq: TransformationSequence, data: np.ndarray, policy: EvalPolicy = EvalPolicy()
) -> tuple[np.ndarray, list[SegmentStatus]]:
    """Build the transformed matrix; failed segments are skipped and reported."""
    if not len(seq):
        raise ValueError("sequence is empty")
    data = np.asarray(data, dtype=float)
    replace = policy.replace_value if policy.nan_policy == "replace" else None
    columns, status, seen = [], [], set()
    for i, seg in enumerate(seq.segments):
        if policy.dedup_segments and seg.tokens in seen:
            status.append(SegmentStatus("duplicate"))
            continue
        try:
            col = evaluate_segment(seg, data, segment_index=i, replace_with=replace)
        except DomainError as err:
            status.append(SegmentStatus("error", err))
            continue
        seen.add(seg.tokens)
        columns.append(col)
        status.append(SegmentStatus("ok"))
    if policy.append_mode == "replace_original":
        if not columns:
            raise AllSegmentsFailed("every segment failed to evaluate")
        return np.column_stack(columns), status
    if not columns:
        return data.copy(), status
    return np.column_stack([data] + columns), status


# --- text form ------------------------------------------------------------------

def to_text(seq: TransformationSequence) -> str:
    return f" {SEP_TEXT} ".join(seg.text for seg in seq.segments)


@dataclass(frozen=True)
class Diagnostic:
    segment_index: int
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class ParseResult:
    sequence: TransformationSequence
    diagnostics: tuple[Diagnostic, ...]
    n_segments_seen: int

    @property
    def n_dropped(self) -> int:
        return sum(1 for d in self.diagnostics if d.kind != "truncated")


def _split_words(words: Sequence[str]) -> list[list[str]]:
    groups: list[list[str]] = [[]]
    for w in words:
        if w == SEP_TEXT:
            groups.append([])
        else:
            groups[-1].append(w)
    return groups


def parse_words(words: Sequence[str], vocab: Vocabulary, max_segments: int = 50) -> ParseResult:
    words = [w for w in words if w not in (SOS_TEXT, EOS_TEXT)]
    if not words:
        return ParseResult(TransformationSequence(), (Diagnostic(0, "empty", "no tokens"),), 0)
    groups = _split_words(words)
    segments, diags = [], []
    for i, group in enumerate(groups):
        if not group:
            diags.append(Diagnostic(i, "empty"))
            continue
        toks = [vocab.lookup(w) for w in group]
        unknown = [w for w, t in zip(group, toks) if t is None or t.is_special]
        if unknown:
            diags.append(Diagnostic(i, "unknown_token", " ".join(unknown)))
            continue
        check = validate_segment(toks)
        if not check:
            diags.append(Diagnostic(i, check.kind, f"position {check.position}"))
            continue
        if len(segments) >= max_segments:
            diags.append(Diagnostic(i, "truncated", f"max_segments={max_segments}"))
            continue
        segments.append(Segment(tuple(toks)))
    return ParseResult(TransformationSequence(tuple(segments)), tuple(diags), len(groups))


def parse_text(text: str, vocab: Vocabulary, max_segments: int = 50) -> ParseResult:
    """Lenient parse: unknown, malformed or empty segments are dropped with a diagnostic."""
    return parse_words(text.split(), vocab, max_segments)


def parse_ids(ids: Sequence[int], vocab: Vocabulary, max_segments: int = 50) -> ParseResult:
    """Parse a raw decoder token stream (ids, optionally with SOS/EOS)."""
    words = []
    for i in ids:
        tok = vocab.token(int(i))
        if tok.kind == "eos":
            break
        # a stray SOS mid-stream must surface as an invalid segment, not vanish
        words.append("<SOS>*" if tok.kind == "sos" else tok.text)
    return parse_words(words, vocab, max_segments)


def to_infix(segment: Segment | Sequence[Token]) -> str:
    tokens = segment.tokens if isinstance(segment, Segment) else tuple(segment)
    check = validate_segment(tokens)
    if not check:
        raise ValueError(f"invalid segment: {check.kind} at {check.position}")
    stack: list[str] = []
    for tok in tokens:
        if tok.kind == "feature":
            stack.append(tok.text)
        elif tok.op.arity == 1:
            stack.append(f"{tok.op.name}({stack.pop()})")
        else:
            b, a = stack.pop(), stack.pop()
            stack.append(f"({a} {tok.op.name} {b})")
    return stack[0]


# --- random generation ----------------------------------------------------------

@lru_cache(maxsize=None)
def _completable(depth: int, remaining: int, has_op: bool, has_unary: bool, has_binary: bool) -> bool:
    """Can a segment in state (depth, has_op) end valid after exactly ``remaining`` more tokens?"""
    if remaining == 0:
        return depth == 1 and has_op
    if depth - 1 > remaining:  # each binary op lowers depth by one at best
        return False
    if _completable(depth + 1, remaining - 1, has_op, has_unary, has_binary):
        return True
    if has_unary and depth >= 1 and _completable(depth, remaining - 1, True, has_unary, has_binary):
        return True
    if has_binary and depth >= 2 and _completable(depth - 1, remaining - 1, True, has_unary, has_binary):
        return True
    return False


def completable_within(depth: int, has_op: bool, budget: int, vocab: Vocabulary) -> bool:
    """True if some continuation of length <= ``budget`` completes the segment."""
    hu, hb = bool(vocab.unary_ids), bool(vocab.binary_ids)
    return any(_completable(depth, r, has_op, hu, hb) for r in range(budget + 1))


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_valid_segment(seed, vocab: Vocabulary, max_len: int = 7) -> Segment:
    """Sample a segment that always validates.

    Length is uniform over achievable lengths in [2, max_len]; each position
    is then uniform over tokens that keep the segment completable.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    rng = check_random_state(seed)
    hu, hb = bool(vocab.unary_ids), bool(vocab.binary_ids)
    lengths = [n for n in range(2, max_len + 1) if _completable(0, n, False, hu, hb)]
    if not lengths:
        raise ValueError(f"no valid segment of length <= {max_len} with this operator set")
    length = int(rng.choice(lengths))
    depth, has_op, out = 0, False, []
    for step in range(length):
        remaining = length - step - 1
        choices = []
        if _completable(depth + 1, remaining, has_op, hu, hb):
            choices += [(t, depth + 1, has_op) for t in vocab.feature_ids]
        if depth >= 1 and _completable(depth, remaining, True, hu, hb):
            choices += [(t, depth, True) for t in vocab.unary_ids]
        if depth >= 2 and _completable(depth - 1, remaining, True, hu, hb):
            choices += [(t, depth - 1, True) for t in vocab.binary_ids]
        tid, depth, has_op = choices[int(rng.integers(len(choices)))]
        out.append(vocab.token(tid))
    return Segment(tuple(out))
