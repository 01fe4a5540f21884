"""Vocabulary, next-token distributions and the probability primitives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class InvalidInputError(ValueError):
    """Raised when a vector or argument violates a documented precondition."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token surface strings; ids are positions, surfaces may repeat."""

    tokens: tuple[str, ...]

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(str(t) for t in tokens)
        if len(tokens) < 2:
            raise InvalidInputError(f"vocabulary needs at least 2 tokens, got {len(tokens)}")
        object.__setattr__(self, "tokens", tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token_id: int) -> str:
        return self.tokens[token_id]

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in ids)

    def id_of(self, surface: str) -> int:
        """First id whose surface equals ``surface``."""
        try:
            return self.tokens.index(surface)
        except ValueError:
            raise KeyError(surface) from None


@dataclass(frozen=True)
class TokenDistribution:
    """Unnormalized next-token scores (logits) at one decode step."""

    logits: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.logits, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidInputError("logits must be a nonempty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("logits must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "logits", arr)

    def __len__(self) -> int:
        return self.logits.size

    def check_vocab(self, vocab: Vocabulary) -> None:
        if len(self) != vocab.size:
            raise InvalidInputError(
                f"distribution has {len(self)} entries, vocabulary has {vocab.size}"
            )


@dataclass(frozen=True)
class PolarityPromptPair:
    """A positive and a negative instruction for the same question."""

    positive: str
    negative: str
    question: str

    def __post_init__(self):
        if not (self.positive and self.negative and self.question):
            raise InvalidInputError("positive, negative and question must be nonempty")
        if self.positive == self.negative:
            raise InvalidInputError("positive and negative prompts must differ")


def _as_logits(d: TokenDistribution | Sequence[float] | np.ndarray) -> np.ndarray:
    if isinstance(d, TokenDistribution):
        return d.logits
    return TokenDistribution(d).logits


def log_probs(d: TokenDistribution | Sequence[float]) -> np.ndarray:
    """Log-softmax: ``logits - logsumexp(logits)``."""
    z = _as_logits(d)
    m = z.max()
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum())


def softmax(d: TokenDistribution | Sequence[float]) -> np.ndarray:
    z = _as_logits(d)
    e = np.exp(z - z.max())
    return e / e.sum()


def argmax(d: TokenDistribution | Sequence[float]) -> int:
    # np.argmax returns the first maximal index
    return int(np.argmax(_as_logits(d)))


def rank_of(d: TokenDistribution | Sequence[float], token: int) -> int:
    """1-based rank of ``token``; tied tokens share the better rank."""
    z = _as_logits(d)
    if not 0 <= token < z.size:
        raise InvalidInputError(f"token id {token} out of range [0, {z.size})")
    return 1 + int(np.count_nonzero(z > z[token]))
