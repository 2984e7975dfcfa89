"""Decoded token streams shared by the ML decoder, the student LM and teaming."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .expr import ParseResult, Token, TransformationSequence, Vocabulary, parse_ids


@dataclass(frozen=True)
class Decoded:
    """A raw generated stream (ids after SOS, EOS included when emitted) and its parse."""

    raw_ids: tuple[int, ...]
    parse: ParseResult
    distributions: np.ndarray
    terminated: bool

    @property
    def sequence(self) -> TransformationSequence:
        return self.parse.sequence

    @property
    def valid(self) -> bool:
        """Every segment in the raw stream parsed and the stream ended with EOS."""
        return self.terminated and self.parse.n_dropped == 0 and len(self.parse.sequence) > 0

    @property
    def n_segments(self) -> int:
        return self.parse.n_segments_seen

    @property
    def n_invalid_segments(self) -> int:
        return self.parse.n_dropped

    def text(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.token(i).text for i in self.raw_ids)


def decoded_from_ids(raw_ids: Sequence[int], vocab: Vocabulary, distributions=None) -> Decoded:
    raw = tuple(int(i) for i in raw_ids)
    terminated = bool(raw) and raw[-1] == vocab.eos_id
    dists = np.zeros((0, vocab.size)) if distributions is None else np.asarray(distributions)
    return Decoded(raw, parse_ids(raw, vocab), dists, terminated)


def prefix_ids(vocab: Vocabulary, prefix) -> list[int]:
    ids = [vocab.id(t) if isinstance(t, Token) else int(t) for t in prefix]
    if not ids or ids[0] != vocab.sos_id:
        raise ValueError("prefix must begin with SOS")
    for i in ids:
        if not 0 <= i < vocab.size:
            raise KeyError(f"token id {i} out of vocabulary")
    return ids
