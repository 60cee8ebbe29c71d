"""Rerank, filter, answer once, and score with exact match."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

from .lm_gateway import ConfidenceProvider, GatewayError, build_prompt
from .textnorm import normalize_answer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class InferenceConfig:
    top_n: int = 4
    filter_threshold: float = 0.2
    min_docs: int = 2
    doc_position: str = "before"
    prompt_template: str = "v1"

    def __post_init__(self) -> None:
        if self.top_n < 1 or self.min_docs < 1:
            raise ValueError("top_n and min_docs must be >= 1")
        if self.min_docs > self.top_n:
            raise ValueError(f"min_docs ({self.min_docs}) exceeds top_n ({self.top_n})")
        if math.isnan(self.filter_threshold) or self.filter_threshold == math.inf:
            raise ValueError("filter_threshold must be a number below +inf")
        if self.prompt_template != "v1":
            raise ValueError(f"unknown prompt template {self.prompt_template!r}")

    @property
    def unfiltered(self) -> "InferenceConfig":
        """The same settings with filtering disabled (pure top-n reranking)."""
        return InferenceConfig(self.top_n, -math.inf, self.min_docs, self.doc_position, self.prompt_template)


@dataclass(frozen=True)
class RankedDocument:
    doc_id: str
    prob: float
    passed_filter: bool
    final_rank: int | None


def rerank_and_filter(scores: Sequence[tuple[str, float]], cfg: InferenceConfig = InferenceConfig()) -> list[RankedDocument]:
    """Sort by probability, keep those at or above the threshold (at most top_n).

    When fewer than ``min_docs`` clear the threshold, the top
    ``min(min_docs, len(scores))`` are kept regardless. Returns every input
    document; retained ones carry ``final_rank`` 1..n, the rest ``None``.
    The retained set is always a prefix of the sorted list.
    """
    ordered = sorted(scores, key=lambda s: (-s[1], s[0]))
    passed = [p >= cfg.filter_threshold for _, p in ordered]
    n_pass = 0
    while n_pass < len(ordered) and passed[n_pass]:
        n_pass += 1
    keep = min(n_pass, cfg.top_n)
    if keep < cfg.min_docs:
        keep = min(cfg.min_docs, len(ordered))
    return [
        RankedDocument(doc_id, prob, passed[i], i + 1 if i < keep else None)
        for i, (doc_id, prob) in enumerate(ordered)
    ]


def retained(ranked: Sequence[RankedDocument]) -> list[RankedDocument]:
    return sorted((r for r in ranked if r.final_rank is not None), key=lambda r: r.final_rank)


def answer(
    question: str,
    ranked_docs: Sequence[RankedDocument],
    doc_texts: dict[str, str],
    provider: ConfidenceProvider,
    cfg: InferenceConfig = InferenceConfig(),
) -> str:
    """One generation call with the retained documents in final-rank order."""
    docs = [doc_texts[r.doc_id] for r in retained(ranked_docs)]
    return provider.generate(build_prompt(question, docs, cfg.doc_position))


def exact_match(prediction: str, gold_answers: Sequence[str]) -> int:
    if not gold_answers:
        raise ValueError("need at least one gold answer")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


@dataclass(frozen=True)
class Prediction:
    query_id: str
    retained_doc_ids: tuple[str, ...]
    answer: str | None
    em: int | None  # None when generation failed; such queries are skipped, not scored 0

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "retained_doc_ids": list(self.retained_doc_ids),
            "answer": self.answer,
            "em": self.em,
        }


def predict(
    query_id: str,
    question: str,
    gold: Sequence[str],
    ranked_docs: Sequence[RankedDocument],
    doc_texts: dict[str, str],
    provider: ConfidenceProvider,
    cfg: InferenceConfig = InferenceConfig(),
) -> Prediction:
    kept = tuple(r.doc_id for r in retained(ranked_docs))
    try:
        text = answer(question, ranked_docs, doc_texts, provider, cfg)
    except GatewayError as exc:
        logger.warning("query %s: generation failed (%s); skipped from EM", query_id, exc)
        return Prediction(query_id, kept, None, None)
    return Prediction(query_id, kept, text, exact_match(text, gold))


def em_summary(predictions: Sequence[Prediction | dict]) -> dict[str, float]:
    """EM percentage over scored predictions; failed generations are excluded."""
    ems = []
    for p in predictions:
        em = p["em"] if isinstance(p, dict) else p.em
        if em is not None:
            ems.append(int(em))
    scored = len(ems)
    return {
        "scored": scored,
        "skipped": len(predictions) - scored,
        "correct": sum(ems),
        "em": 100.0 * sum(ems) / scored if scored else float("nan"),
    }
