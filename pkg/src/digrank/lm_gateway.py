"""Per-token answer probabilities from a language model.

Two providers share one interface:

* :class:`MockLM` - a deterministic rule-based stand-in used for tests and the
  synthetic world.
* :class:`HttpLM` - a JSON completion endpoint that echoes per-token
  log-probabilities of a supplied continuation (teacher forcing).

Both also expose ``generate`` so the inference stage can ask for an answer.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .textnorm import normalize_answer, tokenize

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE_VERSION = "v1"
_DOC_LINE = re.compile(r"^\[(\d+)\] (.*)$")


class GatewayError(RuntimeError):
    """Base class for provider failures."""


class ProviderTransportError(GatewayError):
    """The endpoint could not be reached (after retries)."""


class MalformedResponseError(GatewayError):
    """The endpoint answered, but not in the expected shape."""


class MissingLogprobsError(GatewayError):
    """The endpoint answered without per-token log-probabilities."""


@dataclass(frozen=True)
class LmRequest:
    prompt_text: str
    answer_text: str
    model_id: str = "mock"

    def __post_init__(self) -> None:
        if not self.answer_text or not self.answer_text.strip():
            raise ValueError("answer_text must be non-empty")


@dataclass(frozen=True)
class TokenProbSequence:
    tokens: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.probs):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.probs)} probabilities")
        if not self.tokens:
            raise ValueError("token sequence must be non-empty")
        for p in self.probs:
            if not 0.0 < p <= 1.0:
                raise ValueError(f"token probability {p!r} outside (0, 1]")


class ConfidenceProvider(Protocol):
    model_id: str

    def score_continuation(self, req: LmRequest) -> TokenProbSequence: ...

    def generate(self, prompt: str) -> str: ...


# ---------------------------------------------------------------------------
# prompts


def build_prompt(
    question: str,
    documents: Sequence[str] = (),
    doc_position: str = "before",
) -> str:
    """Render the fixed prompt template.

    With no documents the prompt is query-only. Documents are numbered in the
    order given; ``doc_position`` puts the block before or after the question.
    """
    q_block = f"Question: {question}"
    if not documents:
        return f"{q_block}\nAnswer:"
    doc_block = "Documents:\n" + "\n".join(
        f"[{i}] {' '.join(text.split())}" for i, text in enumerate(documents, 1)
    )
    if doc_position == "before":
        return f"{doc_block}\n\n{q_block}\nAnswer:"
    if doc_position == "after":
        return f"{q_block}\n\n{doc_block}\nAnswer:"
    raise ValueError(f"doc_position must be 'before' or 'after', got {doc_position!r}")


def prompt_documents(prompt: str) -> list[str]:
    """Recover the document texts from a prompt rendered by :func:`build_prompt`."""
    docs = []
    for line in prompt.splitlines():
        m = _DOC_LINE.match(line)
        if m:
            docs.append(m.group(2))
    return docs


def prompt_question(prompt: str) -> str:
    for line in prompt.splitlines():
        if line.startswith("Question: "):
            return line[len("Question: "):]
    return ""


# ---------------------------------------------------------------------------
# mock provider


@dataclass(frozen=True)
class MockLmSpec:
    """Rules for the deterministic mock LM.

    Every answer token gets the same probability: ``base_confidence`` (or
    ``known_confidence`` when ``knowledge`` maps the prompt's question to this
    answer), plus ``boost_if_answer_present`` when the answer string occurs in
    the prompt, minus ``penalty_if_contradiction_marker`` when the marker token
    does, clamped to [0.01, 0.99]. ``jitter`` adds seeded per-token noise.

    ``generate`` answers by plurality over claims matched by ``claim_pattern``
    in the prompt's documents (ties go to the earliest claim). A claim's
    ``value`` group is the voted answer; if the pattern has a ``subject``
    group, only claims whose subject occurs in the question vote. A known
    answer adds one vote after the documents; with no votes the mock says
    ``unknown``.
    """

    base_confidence: float = 0.3
    boost_if_answer_present: float = 0.6
    penalty_if_contradiction_marker: float = 0.25
    contradiction_marker: str = "allegedly"
    known_confidence: float = 0.95
    knowledge: Mapping[str, str] = field(default_factory=dict)
    claim_pattern: str = r"\bthe (?P<subject>[a-z]+ of [a-z]+ [a-z]+) is (?P<value>[a-z]+ [a-z]+) \."
    jitter: float = 0.0
    seed: int = 0
    model_id: str = "mock"

    def __post_init__(self) -> None:
        for name in ("base_confidence", "known_confidence"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.boost_if_answer_present < 0 or self.penalty_if_contradiction_marker < 0:
            raise ValueError("boost and penalty are non-negative deltas")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        re.compile(self.claim_pattern)


UNKNOWN_ANSWER = "unknown"


class MockLM:
    """Deterministic provider whose output depends only on (spec, request)."""

    PROB_MIN = 0.01
    PROB_MAX = 0.99

    def __init__(self, spec: MockLmSpec = MockLmSpec()):
        self.spec = spec
        self.model_id = spec.model_id
        self._claim = re.compile(spec.claim_pattern)
        self._knowledge = {q.strip(): a for q, a in spec.knowledge.items()}
        self._lock = threading.Lock()
        self.calls = Counter()

    def _count(self, kind: str) -> None:
        with self._lock:
            self.calls[kind] += 1

    def _base(self, prompt: str, answer: str) -> float:
        known = self._knowledge.get(prompt_question(prompt).strip())
        if known is not None and normalize_answer(known) == normalize_answer(answer):
            return self.spec.known_confidence
        return self.spec.base_confidence

    def score_continuation(self, req: LmRequest) -> TokenProbSequence:
        self._count("score")
        s = self.spec
        p = self._base(req.prompt_text, req.answer_text)
        if req.answer_text.strip().lower() in req.prompt_text.lower():
            p += s.boost_if_answer_present
        if s.contradiction_marker and s.contradiction_marker.lower() in tokenize(req.prompt_text):
            p -= s.penalty_if_contradiction_marker
        tokens = tuple(req.answer_text.split())
        probs = [p] * len(tokens)
        if s.jitter:
            probs = [q + self._noise(req, i) for i, q in enumerate(probs)]
        # rounding keeps rule arithmetic exact in config units (0.3 + 0.6 -> 0.9)
        probs = [round(min(max(q, self.PROB_MIN), self.PROB_MAX), 12) for q in probs]
        return TokenProbSequence(tokens, tuple(probs))

    def _noise(self, req: LmRequest, i: int) -> float:
        key = f"{self.spec.seed}\x1f{req.prompt_text}\x1f{req.answer_text}\x1f{i}".encode()
        u = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") / 2**64
        return self.spec.jitter * (2.0 * u - 1.0)

    def generate(self, prompt: str) -> str:
        self._count("generate")
        votes: Counter[str] = Counter()
        first_seen: dict[str, int] = {}
        question = prompt_question(prompt).lower()
        has_subject = "subject" in self._claim.groupindex
        has_value = "value" in self._claim.groupindex
        for doc in prompt_documents(prompt):
            for m in self._claim.finditer(doc.lower()):
                if has_subject and m.group("subject") not in question:
                    continue
                value = m.group("value") if has_value else m.group(1)
                votes[value] += 1
                first_seen.setdefault(value, len(first_seen))
        known = self._knowledge.get(prompt_question(prompt).strip())
        if known is not None:
            votes[known] += 1
            first_seen.setdefault(known, len(first_seen))
        if not votes:
            return UNKNOWN_ANSWER
        return min(votes, key=lambda v: (-votes[v], first_seen[v]))


def mock_lm(spec: MockLmSpec = MockLmSpec()) -> MockLM:
    return MockLM(spec)


# ---------------------------------------------------------------------------
# HTTP provider


@dataclass(frozen=True)
class HttpLmConfig:
    endpoint: str
    model_id: str
    api_key_env: str = "DIGRANK_API_KEY"
    answer_separator: str = " "
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_s: float = 0.5
    max_new_tokens: int = 32


class HttpLM:
    """Completion-endpoint client.

    Teacher-forced scoring sends ``prompt + separator + answer`` with
    ``echo=true`` and ``max_tokens=0`` and slices the answer span out of the
    echoed per-token log-probabilities using the returned text offsets.
    """

    _RETRY_STATUS = {408, 429, 500, 502, 503, 504}

    def __init__(
        self,
        config: HttpLmConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.model_id = config.model_id
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self._headers = headers
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    def _post(self, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self._sleep(self.config.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.config.endpoint, json=payload, headers=self._headers)
            except httpx.TransportError as exc:
                last_exc = exc
                logger.warning("transport error on attempt %d: %s", attempt + 1, exc)
                continue
            if resp.status_code in self._RETRY_STATUS:
                last_exc = ProviderTransportError(f"HTTP {resp.status_code}")
                logger.warning("retryable status %d on attempt %d", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProviderTransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise MalformedResponseError(f"response body is not JSON: {exc}") from exc
        raise ProviderTransportError(
            f"gave up after {self.config.max_retries + 1} attempts: {last_exc}"
        ) from last_exc

    def score_continuation(self, req: LmRequest) -> TokenProbSequence:
        prefix = req.prompt_text + self.config.answer_separator
        payload = {
            "model": req.model_id or self.model_id,
            "prompt": prefix + req.answer_text,
            "echo": True,
            "max_tokens": 0,
            "logprobs": 1,
        }
        body = self._post(payload)
        try:
            choice = body["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("response has no choices") from exc
        lp = choice.get("logprobs") if isinstance(choice, dict) else None
        if not lp or lp.get("token_logprobs") is None:
            raise MissingLogprobsError("provider returned no per-token log-probabilities")
        tokens = lp.get("tokens")
        logprobs = lp["token_logprobs"]
        if not isinstance(tokens, list) or not isinstance(logprobs, list) or len(tokens) != len(logprobs):
            raise MalformedResponseError("tokens and token_logprobs missing or misaligned")
        idx = _answer_span(tokens, lp.get("text_offset"), len(prefix), req.answer_text)
        if not idx:
            raise MalformedResponseError("echoed tokens do not cover the answer")
        span = [logprobs[i] for i in idx]
        if any(v is None for v in span):
            raise MissingLogprobsError("answer tokens are missing log-probabilities")
        try:
            probs = tuple(min(math.exp(float(v)), 1.0) for v in span)
        except (TypeError, ValueError) as exc:
            raise MalformedResponseError(f"non-numeric log-probability: {exc}") from exc
        if any(p <= 0.0 for p in probs):
            raise MalformedResponseError("log-probability underflows to zero probability")
        return TokenProbSequence(tuple(tokens[i] for i in idx), probs)

    def generate(self, prompt: str) -> str:
        payload = {
            "model": self.model_id,
            "prompt": prompt,
            "echo": False,
            "max_tokens": self.config.max_new_tokens,
            "temperature": 0,
        }
        body = self._post(payload)
        try:
            text = body["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("response has no completion text") from exc
        return str(text).strip().split("\n")[0].strip()


def _answer_span(
    tokens: list[str], offsets: list[int] | None, answer_start: int, answer: str
) -> list[int]:
    if offsets is not None:
        if len(offsets) != len(tokens):
            raise MalformedResponseError("text_offset length differs from tokens")
        # a token that straddles the separator (" Paris") still belongs to the answer
        return [i for i, (off, tok) in enumerate(zip(offsets, tokens)) if off + len(tok) > answer_start]
    # no offsets: walk back from the end until the answer text is covered
    need = len("".join(answer.split()))
    covered = 0
    i = len(tokens)
    while i > 0 and covered < need:
        i -= 1
        covered += len("".join(tokens[i].split()))
    return list(range(i, len(tokens)))
