"""Distribution providers: a deterministic table model and an HTTP logit-server client."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from promptcd.distribution import InvalidInputError, TokenDistribution, Vocabulary

logger = logging.getLogger(__name__)

UNKNOWN_ID = 0


class BackendError(RuntimeError):
    """A provider failed to produce a distribution."""

    partial_trace = None


class ProtocolError(BackendError):
    """The logit server answered with something that breaks the wire contract."""


class SizingError(InvalidInputError):
    """Prompt does not fit into the provider's context window."""


@runtime_checkable
class DistributionProvider(Protocol):
    """What the decoder needs from a model.

    ``n_prompt`` tells the provider how many leading ids are prompt; the
    rest are generated tokens. Providers that do not need it ignore it.
    """

    max_context: int | None

    def vocabulary(self) -> Vocabulary: ...

    def encode(self, text: str) -> list[int]: ...

    def next_distribution(
        self, ids: Sequence[int], n_prompt: int | None = None
    ) -> TokenDistribution: ...


# --------------------------------------------------------------------------
# table backend
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TableRule:
    prompt_contains: str
    steps: tuple[np.ndarray, ...] = field(repr=False)


@dataclass(frozen=True)
class TableModelSpec:
    """Synthetic model: ordered substring rules, each with per-step logit vectors."""

    vocab: tuple[str, ...]
    rules: tuple[TableRule, ...]
    default_steps: tuple[np.ndarray, ...] = field(repr=False)
    max_context: int | None = None

    def __post_init__(self):
        Vocabulary(self.vocab)
        n = len(self.vocab)

        def check(steps, where):
            if len(steps) == 0:
                raise InvalidInputError(f"{where}: steps must be nonempty")
            for k, v in enumerate(steps):
                if v.shape != (n,):
                    raise InvalidInputError(
                        f"{where}: step {k} has length {v.size}, vocabulary has {n}"
                    )
                if not np.all(np.isfinite(v)):
                    raise InvalidInputError(f"{where}: step {k} has non-finite logits")

        for i, rule in enumerate(self.rules):
            check(rule.steps, f"rule {i} ({rule.prompt_contains!r})")
        check(self.default_steps, "default_steps")

    @classmethod
    def from_dict(cls, doc: dict) -> "TableModelSpec":
        try:
            vocab = tuple(doc["vocab"])
            rules = tuple(
                TableRule(
                    prompt_contains=str(r["match"]["prompt_contains"]),
                    steps=_freeze_steps(r["steps"]),
                )
                for r in doc.get("rules", [])
            )
            default_steps = _freeze_steps(doc["default_steps"])
        except (KeyError, TypeError) as exc:
            raise InvalidInputError(f"malformed table spec: missing or bad field {exc}") from exc
        return cls(vocab, rules, default_steps, doc.get("max_context"))

    def to_dict(self) -> dict:
        doc = {
            "vocab": list(self.vocab),
            "rules": [
                {
                    "match": {"prompt_contains": r.prompt_contains},
                    "steps": [s.tolist() for s in r.steps],
                }
                for r in self.rules
            ],
            "default_steps": [s.tolist() for s in self.default_steps],
        }
        if self.max_context is not None:
            doc["max_context"] = self.max_context
        return doc

    @classmethod
    def load(cls, path: str | Path) -> "TableModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)


def _freeze_steps(steps) -> tuple[np.ndarray, ...]:
    out = []
    for s in steps:
        arr = np.array(s, dtype=np.float64)
        if arr.ndim != 1:
            raise InvalidInputError("each step must be a flat logit vector")
        arr.setflags(write=False)
        out.append(arr)
    return tuple(out)


class TableProvider:
    """Pure lookup model backed by a :class:`TableModelSpec`."""

    def __init__(self, spec: TableModelSpec):
        self.spec = spec
        self._vocab = Vocabulary(spec.vocab)
        self.max_context = spec.max_context
        # longest surfaces first for greedy longest-match
        self._by_length = sorted(
            ((s, i) for i, s in enumerate(spec.vocab) if s),
            key=lambda p: (-len(p[0]), p[1]),
        )

    def vocabulary(self) -> Vocabulary:
        return self._vocab

    def encode(self, text: str) -> list[int]:
        ids = []
        pos = 0
        while pos < len(text):
            for surface, tid in self._by_length:
                if text.startswith(surface, pos):
                    ids.append(tid)
                    pos += len(surface)
                    break
            else:
                ids.append(UNKNOWN_ID)
                pos += 1
        return ids

    def steps_for(self, prompt_text: str) -> tuple[np.ndarray, ...]:
        for rule in self.spec.rules:
            if rule.prompt_contains in prompt_text:
                return rule.steps
        return self.spec.default_steps

    def next_distribution(self, ids: Sequence[int], n_prompt: int | None = None) -> TokenDistribution:
        ids = list(ids)
        if n_prompt is None:
            n_prompt = len(ids)
        if not 0 <= n_prompt <= len(ids):
            raise InvalidInputError(f"n_prompt={n_prompt} outside [0, {len(ids)}]")
        steps = self.steps_for(self._vocab.decode(ids[:n_prompt]))
        k = min(len(ids) - n_prompt, len(steps) - 1)
        return TokenDistribution(steps[k])


def table_provider(spec: TableModelSpec | str | Path) -> TableProvider:
    if not isinstance(spec, TableModelSpec):
        spec = TableModelSpec.load(spec)
    return TableProvider(spec)


def conflict_scenario(
    cont_token: int,
    para_token: int,
    pos_margin: float,
    neg_margin: float,
    vocab: Sequence[str],
    positive_key: str = "<pos>",
    negative_key: str = "<neg>",
    eos_token: int | None = None,
) -> TableModelSpec:
    """Knowledge-conflict model with a controlled parametric lead.

    Under any prompt containing ``positive_key`` the parametric token leads the
    contextual one by ``pos_margin`` logits; under ``negative_key`` it leads by
    ``neg_margin``. Every other token sits at least 3 logits below both. Keys
    missing from ``vocab`` are appended so the table encoder can recover them.
    With ``eos_token`` set, a second step makes that token dominant in both
    contexts so multi-token decodes terminate.
    """
    if cont_token == para_token:
        raise InvalidInputError("contextual and parametric tokens must differ")
    vocab = list(vocab)
    for key in (positive_key, negative_key):
        if key not in vocab:
            vocab.append(key)
    n = len(vocab)
    for t in (cont_token, para_token) + ((eos_token,) if eos_token is not None else ()):
        if not 0 <= t < n:
            raise InvalidInputError(f"token id {t} out of range")

    def first_step(margin: float) -> np.ndarray:
        v = np.full(n, min(0.0, margin) - 3.0)
        v[cont_token] = 0.0
        v[para_token] = margin
        return v

    def eos_step() -> np.ndarray:
        v = np.full(n, -3.0)
        v[eos_token] = 5.0
        return v

    def steps(margin):
        s = [first_step(margin)]
        if eos_token is not None:
            s.append(eos_step())
        return _freeze_steps(s)

    pos_steps = steps(pos_margin)
    return TableModelSpec(
        vocab=tuple(vocab),
        rules=(
            TableRule(positive_key, pos_steps),
            TableRule(negative_key, steps(neg_margin)),
        ),
        default_steps=pos_steps,
    )


# --------------------------------------------------------------------------
# HTTP backend
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LogitServerEndpoint:
    base_url: str
    timeout_ms: float = 30_000
    retries: int = 2

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise InvalidInputError("timeout must be positive")
        if self.retries < 0:
            raise InvalidInputError("retries must be >= 0")


class HttpProvider:
    """Client for a logit server speaking the ``/v1/vocab|encode|logits`` JSON protocol."""

    max_context = None

    def __init__(self, endpoint: LogitServerEndpoint, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self._client = client or httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            timeout=endpoint.timeout_ms / 1000.0,
        )
        self._vocab: Vocabulary | None = None

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        attempts = self.endpoint.retries + 1
        last: Exception | None = None
        for attempt in range(1, attempts + 1):
            try:
                resp = self._client.request(method, path, json=payload)
            except httpx.TransportError as exc:
                last = exc
                logger.warning("%s %s attempt %d/%d failed: %s", method, path, attempt, attempts, exc)
                continue
            if resp.status_code >= 500:
                last = BackendError(f"{method} {path}: HTTP {resp.status_code}")
                logger.warning("%s %s attempt %d/%d: HTTP %d", method, path, attempt, attempts, resp.status_code)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{method} {path}: HTTP {resp.status_code}")
            try:
                body = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{method} {path}: response is not JSON") from exc
            if not isinstance(body, dict):
                raise ProtocolError(f"{method} {path}: expected a JSON object")
            return body
        raise BackendError(f"{method} {path}: gave up after {attempts} attempts ({last})")

    def vocabulary(self) -> Vocabulary:
        if self._vocab is None:
            body = self._request("GET", "/v1/vocab")
            tokens = body.get("tokens")
            if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise ProtocolError("/v1/vocab: 'tokens' must be a list of strings")
            try:
                self._vocab = Vocabulary(tokens)
            except InvalidInputError as exc:
                raise ProtocolError(f"/v1/vocab: {exc}") from exc
        return self._vocab

    def encode(self, text: str) -> list[int]:
        body = self._request("POST", "/v1/encode", {"text": text})
        ids = body.get("ids")
        if not isinstance(ids, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
            raise ProtocolError("/v1/encode: 'ids' must be a list of integers")
        n = self.vocabulary().size
        if any(not 0 <= i < n for i in ids):
            raise ProtocolError("/v1/encode: id outside vocabulary")
        return ids

    def next_distribution(self, ids: Sequence[int], n_prompt: int | None = None) -> TokenDistribution:
        body = self._request("POST", "/v1/logits", {"ids": [int(i) for i in ids]})
        logits = body.get("logits")
        if not isinstance(logits, list):
            raise ProtocolError("/v1/logits: 'logits' must be a list")
        n = self.vocabulary().size
        if len(logits) != n:
            raise ProtocolError(f"/v1/logits: got {len(logits)} logits for a vocabulary of {n}")
        try:
            return TokenDistribution(np.asarray(logits, dtype=np.float64))
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise ProtocolError(f"/v1/logits: {exc}") from exc


def http_provider(ep: LogitServerEndpoint) -> HttpProvider:
    return HttpProvider(ep)
