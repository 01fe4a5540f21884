"""Knowledge token capturing and context-faithfulness metrics.

``capture`` walks a decode trace looking for the first step whose greedy token
belongs to either answer, then scans that step's vocabulary in descending
logit order to record the first contextual-only and parametric-only tokens.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from promptcd.distribution import InvalidInputError, TokenDistribution

RANK_BINS: tuple[tuple[str, int, float], ...] = (
    ("1", 1, 1),
    ("2-5", 2, 5),
    ("6-20", 6, 20),
    (">20", 21, float("inf")),
)


class Membership(str, Enum):
    COMMON = "common"
    CONT_ONLY = "cont-only"
    PARA_ONLY = "para-only"
    NEITHER = "neither"


class Diagnosis(str, Enum):
    FLIPPED = "flipped"
    STUBBORN = "stubborn"
    ABSENT = "absent"


@dataclass(frozen=True)
class CaptureResult:
    p_cont: float | None = None
    p_para: float | None = None
    rank_cont: int | None = None
    rank_para: int | None = None
    position: int | None = None

    def __post_init__(self):
        if (self.p_cont is None) != (self.rank_cont is None):
            raise InvalidInputError("p_cont and rank_cont must be set together")
        if (self.p_para is None) != (self.rank_para is None):
            raise InvalidInputError("p_para and rank_para must be set together")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConflictRecord:
    id: str
    question: str
    context: str
    answer_context: str
    answer_parametric: str

    def __post_init__(self):
        if not self.answer_context or not self.answer_parametric:
            raise InvalidInputError(f"record {self.id}: answers must be nonempty")
        if self.answer_context == self.answer_parametric:
            raise InvalidInputError(f"record {self.id}: answers must differ")

    @classmethod
    def from_json(cls, doc: dict) -> "ConflictRecord":
        try:
            return cls(
                id=str(doc["id"]),
                question=str(doc["question"]),
                context=str(doc.get("context", "")),
                answer_context=str(doc["answer_context"]),
                answer_parametric=str(doc["answer_parametric"]),
            )
        except KeyError as exc:
            raise InvalidInputError(f"record missing field {exc}") from exc


def load_records(path: str | Path) -> list[ConflictRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(ConflictRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, InvalidInputError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    return records


@dataclass(frozen=True)
class BehaviorMetrics:
    con_r: float
    par_r: float
    mr: float
    n: int
    mr_undefined: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def common_membership(s: str, s_cont: str, s_para: str) -> Membership:
    s = s.strip()
    if not s:
        raise InvalidInputError("token string is empty after trimming")
    in_cont = s in s_cont
    in_para = s in s_para
    if in_cont and in_para:
        return Membership.COMMON
    if in_cont:
        return Membership.CONT_ONLY
    if in_para:
        return Membership.PARA_ONLY
    return Membership.NEITHER


def _logit_vector(step) -> np.ndarray:
    if isinstance(step, TokenDistribution):
        return step.logits
    arr = np.asarray(step, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError("each trace step must be a nonempty 1-D vector")
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise InvalidInputError("trace logits must not be NaN or +inf")
    return arr


def capture(
    trace: Sequence[TokenDistribution | np.ndarray],
    decode: Callable[[int], str] | Sequence[str],
    s_cont: str,
    s_para: str,
) -> CaptureResult:
    """Knowledge Token Capturing over a per-step logit trace.

    Steps may carry ``-inf`` entries (e.g. log of a masked adjusted
    distribution). Ranks are 1-based with ties sharing the better rank.
    """
    if not trace:
        raise InvalidInputError("trace must be nonempty")
    if not callable(decode):
        surfaces = decode
        decode = surfaces.__getitem__

    p_cont = p_para = None
    rank_cont = rank_para = None
    position = None

    for i, step in enumerate(trace):
        z = _logit_vector(step)
        greedy = decode(int(np.argmax(z))).strip()
        if not greedy or (greedy not in s_cont and greedy not in s_para):
            continue
        for j in np.argsort(-z, kind="stable"):
            tok = decode(int(j)).strip()
            if not tok:
                continue
            in_cont = tok in s_cont
            in_para = tok in s_para
            if in_cont and in_para and p_cont is None and p_para is None:
                break
            if in_cont and p_cont is None:
                p_cont = float(z[j])
                rank_cont = 1 + int(np.count_nonzero(z > z[j]))
                position = i if position is None else position
            if in_para and p_para is None:
                p_para = float(z[j])
                rank_para = 1 + int(np.count_nonzero(z > z[j]))
                position = i if position is None else position
            if p_cont is not None and p_para is not None:
                break
        if p_cont is not None and p_para is not None:
            break

    return CaptureResult(p_cont, p_para, rank_cont, rank_para, position)


def classify_stubborn(r: CaptureResult) -> Diagnosis:
    if r.rank_cont is None:
        return Diagnosis.ABSENT
    return Diagnosis.FLIPPED if r.rank_cont == 1 else Diagnosis.STUBBORN


def rank_bin(rank: int | None) -> str | None:
    if rank is None:
        return None
    for label, lo, hi in RANK_BINS:
        if lo <= rank <= hi:
            return label
    raise InvalidInputError(f"rank must be >= 1, got {rank}")


def rank_histogram(results: Iterable[CaptureResult]) -> dict:
    """Counts of contextual/parametric ranks per bin, plus how many were missing."""
    hist = {
        which: {label: 0 for label, _, _ in RANK_BINS} | {"none": 0}
        for which in ("cont", "para")
    }
    for r in results:
        for which, rank in (("cont", r.rank_cont), ("para", r.rank_para)):
            hist[which][rank_bin(rank) or "none"] += 1
    return hist


_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    return _WS.sub(" ", text).strip().casefold()


def score_response(output_text: str, record: ConflictRecord) -> tuple[bool, bool]:
    """``(hits_context, hits_parametric)`` by case-insensitive containment."""
    out = normalize_answer(output_text)
    cont = normalize_answer(record.answer_context)
    para = normalize_answer(record.answer_parametric)
    return (bool(cont) and cont in out, bool(para) and para in out)


def memorization_ratio(con_r: float, par_r: float) -> float:
    """ParR / (ParR + ConR); 0 when both are zero."""
    denom = par_r + con_r
    return par_r / denom if denom > 0 else 0.0


def aggregate_metrics(scored: Sequence[tuple[bool, bool]]) -> BehaviorMetrics:
    if not scored:
        raise InvalidInputError("cannot aggregate an empty list")
    n = len(scored)
    con_r = sum(1 for c, _ in scored if c) / n
    par_r = sum(1 for _, p in scored if p) / n
    return BehaviorMetrics(
        con_r=con_r,
        par_r=par_r,
        mr=memorization_ratio(con_r, par_r),
        n=n,
        mr_undefined=(con_r + par_r) == 0,
    )
