"""Document information gain and the triplet collection loop.

A document's gain is how much it raises the model's confidence in the gold
answer: ``p(y | x, d) - p(y | x)``. :func:`collect` scores every retrieved
candidate of every query once with and once without the document and
streams ``DigTriplet`` records.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from .confidence import ConfidenceParams, estimate_confidence
from .lm_gateway import ConfidenceProvider, GatewayError, LmRequest, build_prompt
from .records import Query, dumps, read_jsonl
from .retrieval import Corpus, RetrievalResult

logger = logging.getLogger(__name__)


class QueryCategory(str, enum.Enum):
    PROFICIENT = "proficient"
    CHALLENGING = "challenging"
    INTERMEDIATE = "intermediate"


class DigCategory(str, enum.Enum):
    POSITIVE = "positive"
    NEGLIGIBLE = "negligible"
    NEGATIVE = "negative"
    UNLABELED = "unlabeled"  # between the negligible band and b1 or b2


@dataclass(frozen=True)
class DigThresholds:
    b1: float = 0.5
    b2: float = -0.2
    band: tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self) -> None:
        lo, hi = self.band
        if not (self.b2 < lo <= hi < self.b1):
            raise ValueError(
                f"need b2 < band_low <= band_high < b1, got b2={self.b2}, band={self.band}, b1={self.b1}"
            )


@dataclass(frozen=True)
class DigTriplet:
    query_id: str
    doc_id: str
    answer: str
    p_base: float
    p_aug: float
    dig: float
    model_id: str

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.query_id, self.doc_id, self.model_id)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, rec: dict) -> "DigTriplet":
        return cls(
            str(rec["query_id"]),
            str(rec["doc_id"]),
            str(rec["answer"]),
            float(rec["p_base"]),
            float(rec["p_aug"]),
            float(rec["dig"]),
            str(rec.get("model_id", "")),
        )


def dig(p_base: float, p_aug: float) -> float:
    for name, p in (("p_base", p_base), ("p_aug", p_aug)):
        if not 0.0 < p <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1], got {p}")
    return p_aug - p_base


def categorize_query(p_base: float, tau_high: float = 0.5, tau_low: float = 0.2) -> QueryCategory:
    if not tau_low < tau_high:
        raise ValueError(f"tau_low must be below tau_high, got {tau_low} >= {tau_high}")
    if p_base >= tau_high:
        return QueryCategory.PROFICIENT
    if p_base <= tau_low:
        return QueryCategory.CHALLENGING
    return QueryCategory.INTERMEDIATE


def categorize_dig(value: float, thresholds: DigThresholds = DigThresholds()) -> DigCategory:
    if value > thresholds.b1:
        return DigCategory.POSITIVE
    if value < thresholds.b2:
        return DigCategory.NEGATIVE
    lo, hi = thresholds.band
    if lo <= value <= hi:
        return DigCategory.NEGLIGIBLE
    return DigCategory.UNLABELED


class Retriever(Protocol):
    def search(self, query: str, top_k: int) -> list[RetrievalResult]: ...


@dataclass
class CollectStats:
    queries: int = 0
    skipped_queries: int = 0
    triplets: int = 0
    resumed: int = 0
    failed: int = 0
    baseline_calls: int = 0
    augmented_calls: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)


@dataclass(frozen=True)
class CollectParams:
    top_k: int = 10
    confidence: ConfidenceParams = ConfidenceParams()
    doc_position: str = "before"
    max_workers: int = 1


def _confidence(provider: ConfidenceProvider, prompt: str, answer: str, params: ConfidenceParams) -> float:
    seq = provider.score_continuation(LmRequest(prompt, answer, provider.model_id))
    return estimate_confidence(seq.probs, params)


def _collect_one(
    query: Query,
    corpus: Corpus,
    retriever: Retriever,
    provider: ConfidenceProvider,
    params: CollectParams,
    done: dict[tuple[str, str, str], DigTriplet],
) -> tuple[list[DigTriplet], CollectStats]:
    st = CollectStats(queries=1)
    candidates = retriever.search(query.question, params.top_k)
    if not candidates:
        logger.info("query %s: no retrievable candidates, skipped", query.id)
        st.skipped_queries = 1
        return [], st
    model = provider.model_id
    pending = [c for c in candidates if (query.id, c.doc_id, model) not in done]
    st.resumed = len(candidates) - len(pending)
    if not pending:
        return [], st

    prior = [t for k, t in done.items() if k[0] == query.id and k[2] == model]
    if prior:
        # reuse the baseline recorded before a restart; never rescore it
        answer, p_base = prior[0].answer, prior[0].p_base
    else:
        query_prompt = build_prompt(query.question, (), params.doc_position)
        best: tuple[float, str] | None = None
        try:
            for variant in query.answers:
                st.baseline_calls += 1
                conf = _confidence(provider, query_prompt, variant, params.confidence)
                if best is None or conf > best[0]:
                    best = (conf, variant)
        except GatewayError as exc:
            logger.warning("query %s: baseline scoring failed (%s)", query.id, exc)
            st.failed = len(pending)
            st.failures = [(query.id, c.doc_id) for c in pending]
            return [], st
        p_base, answer = best

    out = []
    for cand in pending:
        doc = corpus[cand.doc_id]
        prompt = build_prompt(query.question, [doc.full_text], params.doc_position)
        st.augmented_calls += 1
        try:
            p_aug = _confidence(provider, prompt, answer, params.confidence)
        except GatewayError as exc:
            logger.warning("query %s doc %s: scoring failed (%s)", query.id, cand.doc_id, exc)
            st.failed += 1
            st.failures.append((query.id, cand.doc_id))
            continue
        out.append(DigTriplet(query.id, cand.doc_id, answer, p_base, p_aug, dig(p_base, p_aug), model))
    st.triplets = len(out)
    return out, st


def _merge_stats(total: CollectStats, part: CollectStats) -> None:
    for name in ("queries", "skipped_queries", "triplets", "resumed", "failed", "baseline_calls", "augmented_calls"):
        setattr(total, name, getattr(total, name) + getattr(part, name))
    total.failures.extend(part.failures)


def collect(
    queries: Sequence[Query],
    corpus: Corpus,
    retriever: Retriever,
    provider: ConfidenceProvider,
    params: CollectParams = CollectParams(),
    done: Iterable[DigTriplet] = (),
    stats: CollectStats | None = None,
) -> Iterator[DigTriplet]:
    """Stream one triplet per (query, candidate document).

    ``done`` holds triplets from an earlier interrupted run; their
    (query_id, doc_id, model_id) keys are skipped and their baseline is reused.
    Queries are scored concurrently up to ``params.max_workers``; output
    follows query order regardless. With several gold answers, the variant
    with the highest query-only confidence is used for both terms.
    """
    done_map = {t.key: t for t in done}
    stats = stats if stats is not None else CollectStats()

    def work(q: Query):
        return _collect_one(q, corpus, retriever, provider, params, done_map)

    if params.max_workers <= 1:
        results: Iterable = map(work, queries)
        for triplets, part in results:
            _merge_stats(stats, part)
            yield from triplets
        return
    with ThreadPoolExecutor(max_workers=params.max_workers) as pool:
        for triplets, part in pool.map(work, queries):
            _merge_stats(stats, part)
            yield from triplets


class TripletWriter:
    """Append-only JSONL sink keyed by (query_id, doc_id, model_id)."""

    def __init__(self, path: str | Path, header: dict | None = None):
        self.path = Path(path)
        self.header: dict = {}
        self.existing: list[DigTriplet] = []
        if self.path.exists() and self.path.stat().st_size:
            self.header, records = read_jsonl(self.path)
            self.existing = [DigTriplet.from_dict(r) for r in records]
        elif header is not None:
            self.path.write_text(dumps({"_header": header}) + "\n", encoding="utf-8")
            self.header = header
        self._keys = {t.key for t in self.existing}

    def write(self, triplets: Iterable[DigTriplet]) -> int:
        n = 0
        with open(self.path, "a", encoding="utf-8") as fh:
            for t in triplets:
                if t.key in self._keys:
                    continue
                fh.write(dumps(t.to_dict()) + "\n")
                fh.flush()
                self._keys.add(t.key)
                n += 1
        return n


def read_triplets(path: str | Path) -> tuple[dict, list[DigTriplet]]:
    header, records = read_jsonl(path)
    return header, [DigTriplet.from_dict(r) for r in records]
