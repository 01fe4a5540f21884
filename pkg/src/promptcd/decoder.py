"""Contrastive token decoding between a positive and a negative prompt context.

Each step scores head tokens by ``log P_pos(x) - gamma * log P_neg(x)``, where
the head is the set of tokens whose positive probability is at least
``apc_ratio`` times the positive maximum. The chosen token is appended to both
contexts so the two distributions always condition on the same continuation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import IO, Iterable, Literal, Sequence

import numpy as np

from promptcd.backends import BackendError, DistributionProvider, SizingError
from promptcd.distribution import (
    InvalidInputError,
    PolarityPromptPair,
    TokenDistribution,
    log_probs,
    softmax,
)

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5
DEFAULT_APC_RATIO = 0.1
DEFAULT_TEMPLATE = "{prompt}\n{context}\n{question}"
FULL_VECTOR_LIMIT = 4096


@dataclass(frozen=True)
class ContrastiveConfig:
    gamma: float = DEFAULT_GAMMA
    apc_ratio: float = DEFAULT_APC_RATIO
    max_tokens: int = 32
    strategy: Literal["greedy", "sample"] = "greedy"
    seed: int | None = None
    stop_tokens: frozenset[int] = frozenset()
    use_apc: bool = True

    def __post_init__(self):
        if not self.gamma >= 0:
            raise InvalidInputError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.apc_ratio <= 1:
            raise InvalidInputError(f"apc_ratio must be in (0, 1], got {self.apc_ratio}")
        if self.max_tokens < 1:
            raise InvalidInputError("max_tokens must be >= 1")
        if self.strategy not in ("greedy", "sample"):
            raise InvalidInputError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "stop_tokens", frozenset(int(t) for t in self.stop_tokens))


@dataclass
class DualContext:
    """Positive and negative token sequences sharing a generated suffix."""

    positive_prompt: tuple[int, ...]
    negative_prompt: tuple[int, ...]
    generated: list[int] = field(default_factory=list)

    @property
    def positive_seq(self) -> list[int]:
        return [*self.positive_prompt, *self.generated]

    @property
    def negative_seq(self) -> list[int]:
        return [*self.negative_prompt, *self.generated]

    def append(self, token: int) -> None:
        self.generated.append(int(token))


@dataclass(frozen=True)
class ContrastiveScores:
    """Score vector with an explicit head mask; entries outside the head are excluded."""

    values: np.ndarray
    head: np.ndarray  # bool mask

    def masked(self) -> np.ndarray:
        """Scores with ``-inf`` outside the head, for ranking only."""
        return np.where(self.head, self.values, -np.inf)


@dataclass(frozen=True)
class TraceStep:
    step: int
    positive: TokenDistribution
    negative: TokenDistribution | None
    head: tuple[int, ...]
    adjusted: np.ndarray
    selected: int
    stopped: bool = False

    def adjusted_log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.adjusted)

    def to_json(self, top_m: int | None = None) -> dict:
        full = top_m is None and self.positive.logits.size <= FULL_VECTOR_LIMIT
        m = top_m if top_m is not None else 64
        support = np.flatnonzero(self.adjusted > 0)
        return {
            "step": self.step,
            "selected": self.selected,
            "stopped": self.stopped,
            "head": list(self.head),
            "pos_logits": _vector_json(self.positive.logits, full, m),
            "neg_logits": None if self.negative is None else _vector_json(self.negative.logits, full, m),
            "adjusted": {str(int(i)): float(self.adjusted[i]) for i in support},
        }

    @classmethod
    def from_json(cls, doc: dict, vocab_size: int) -> "TraceStep":
        adjusted = np.zeros(vocab_size)
        for k, v in doc["adjusted"].items():
            adjusted[int(k)] = float(v)
        neg = doc.get("neg_logits")
        return cls(
            step=int(doc["step"]),
            positive=TokenDistribution(_vector_from_json(doc["pos_logits"], vocab_size)),
            negative=None if neg is None else TokenDistribution(_vector_from_json(neg, vocab_size)),
            head=tuple(int(t) for t in doc["head"]),
            adjusted=adjusted,
            selected=int(doc["selected"]),
            stopped=bool(doc.get("stopped", False)),
        )


# Top-M pairs leave unlisted entries unknown; they come back as a floor well
# below the smallest listed logit so ranks among listed tokens are preserved.
_TRUNCATED_FLOOR = 1e4


def _vector_json(v: np.ndarray, full: bool, m: int):
    if full:
        return v.tolist()
    top = np.argsort(-v, kind="stable")[:m]
    return [[int(i), float(v[i])] for i in top]


def _vector_from_json(doc, vocab_size: int) -> np.ndarray:
    if doc and isinstance(doc[0], list):
        pairs = [(int(i), float(x)) for i, x in doc]
        out = np.full(vocab_size, min(x for _, x in pairs) - _TRUNCATED_FLOOR)
        for i, x in pairs:
            out[i] = x
        return out
    out = np.asarray(doc, dtype=np.float64)
    if out.size != vocab_size:
        raise InvalidInputError(f"trace vector has {out.size} entries, expected {vocab_size}")
    return out


@dataclass
class DecodeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def write_jsonl(self, fh: IO[str], top_m: int | None = None) -> None:
        for s in self.steps:
            fh.write(json.dumps(s.to_json(top_m)) + "\n")

    @classmethod
    def read_jsonl(cls, lines: Iterable[str], vocab_size: int) -> "DecodeTrace":
        steps = [TraceStep.from_json(json.loads(line), vocab_size) for line in lines if line.strip()]
        return cls(steps)


@dataclass
class DecodeResult:
    ids: list[int]
    text: str
    trace: DecodeTrace
    stopped: bool


def plausibility_head(pos: TokenDistribution, apc_ratio: float) -> np.ndarray:
    """Boolean mask of tokens with ``P_pos(x) >= apc_ratio * max P_pos``."""
    if not 0 < apc_ratio <= 1:
        raise InvalidInputError(f"apc_ratio must be in (0, 1], got {apc_ratio}")
    p = softmax(pos)
    return p >= apc_ratio * p.max()


def contrastive_scores(
    pos: TokenDistribution,
    neg: TokenDistribution,
    gamma: float,
    head: np.ndarray | Iterable[int],
) -> ContrastiveScores:
    if len(pos) != len(neg):
        raise InvalidInputError(f"vocabulary mismatch: {len(pos)} vs {len(neg)}")
    head = _head_mask(head, len(pos))
    if not head.any():
        raise InvalidInputError("head must be nonempty")
    values = log_probs(pos) - gamma * log_probs(neg)
    return ContrastiveScores(np.where(head, values, 0.0), head)


def _head_mask(head, n: int) -> np.ndarray:
    arr = np.asarray(head)
    if arr.dtype == bool:
        if arr.shape != (n,):
            raise InvalidInputError("head mask length does not match vocabulary")
        return arr
    mask = np.zeros(n, dtype=bool)
    mask[np.asarray(list(head), dtype=int)] = True
    return mask


def adjusted_distribution(scores: ContrastiveScores) -> np.ndarray:
    """Softmax over head entries; exactly zero elsewhere."""
    head = scores.head
    if not head.any():
        raise InvalidInputError("no head tokens to normalize over")
    out = np.zeros(head.size)
    v = scores.values[head]
    e = np.exp(v - v.max())
    out[head] = e / e.sum()
    return out


def sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    """One categorical draw from ``probs``; the sampling path of :func:`decode_step`."""
    return int(rng.choice(probs.size, p=probs))


def _select(scores: ContrastiveScores, probs: np.ndarray, cfg: ContrastiveConfig, rng) -> int:
    if cfg.strategy == "greedy":
        return int(np.argmax(scores.masked()))
    return sample_token(probs, rng)


def decode_step(
    ctx: DualContext,
    provider: DistributionProvider,
    cfg: ContrastiveConfig,
    rng: np.random.Generator | None = None,
    *,
    contrast: bool = True,
    step: int | None = None,
) -> tuple[int, TraceStep]:
    """One synchronized step. With ``contrast=False`` only the positive context is queried."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    pos = provider.next_distribution(ctx.positive_seq, len(ctx.positive_prompt))
    if contrast:
        neg = provider.next_distribution(ctx.negative_seq, len(ctx.negative_prompt))
        if len(neg) != len(pos):
            raise InvalidInputError("positive and negative distributions differ in size")
        head = plausibility_head(pos, cfg.apc_ratio) if cfg.use_apc else np.ones(len(pos), bool)
        scores = contrastive_scores(pos, neg, cfg.gamma, head)
    else:
        neg = None
        scores = ContrastiveScores(log_probs(pos), np.ones(len(pos), bool))
    probs = adjusted_distribution(scores)
    token = _select(scores, probs, cfg, rng)
    index = len(ctx.generated) if step is None else step
    stopped = token in cfg.stop_tokens
    if not stopped:
        ctx.append(token)
    entry = TraceStep(
        step=index,
        positive=pos,
        negative=neg,
        head=tuple(int(i) for i in np.flatnonzero(scores.head)),
        adjusted=probs,
        selected=token,
        stopped=stopped,
    )
    return token, entry


def encode_context(
    pair: PolarityPromptPair,
    provider: DistributionProvider,
    template: str = DEFAULT_TEMPLATE,
    context: str = "",
) -> DualContext:
    if "{question}" not in template:
        raise InvalidInputError("prompt template must contain {question}")
    pos_text = template.format(prompt=pair.positive, question=pair.question, context=context)
    neg_text = template.format(prompt=pair.negative, question=pair.question, context=context)
    pos_ids = tuple(provider.encode(pos_text))
    neg_ids = tuple(provider.encode(neg_text))
    limit = getattr(provider, "max_context", None)
    if limit is not None:
        longest = max(len(pos_ids), len(neg_ids))
        if longest > limit:
            raise SizingError(f"prompt needs {longest} tokens, backend context limit is {limit}")
    return DualContext(pos_ids, neg_ids)


def decode(
    pair: PolarityPromptPair,
    provider: DistributionProvider,
    cfg: ContrastiveConfig = ContrastiveConfig(),
    *,
    template: str = DEFAULT_TEMPLATE,
    context: str = "",
    vanilla: bool = False,
) -> DecodeResult:
    """Run the decode loop until a stop token or ``cfg.max_tokens`` steps.

    ``vanilla=True`` decodes from the positive context alone (no contrast, no
    head mask), which is the plain prompted baseline. A :class:`BackendError`
    raised mid-decode carries the steps completed so far in ``partial_trace``.
    """
    ctx = encode_context(pair, provider, template, context)
    vocab = provider.vocabulary()
    rng = np.random.default_rng(cfg.seed)
    trace = DecodeTrace()
    stopped = False
    for step in range(cfg.max_tokens):
        try:
            token, entry = decode_step(ctx, provider, cfg, rng, contrast=not vanilla, step=step)
        except BackendError as exc:
            exc.partial_trace = trace
            raise
        trace.steps.append(entry)
        if entry.stopped:
            stopped = True
            break
    ids = list(ctx.generated)
    return DecodeResult(ids=ids, text=vocab.decode(ids), trace=trace, stopped=stopped)


def stop_ids(vocab_tokens: Sequence[str], surfaces: Iterable[str]) -> frozenset[int]:
    """All ids whose surface matches one of ``surfaces``."""
    wanted = set(surfaces)
    return frozenset(i for i, t in enumerate(vocab_tokens) if t in wanted)
