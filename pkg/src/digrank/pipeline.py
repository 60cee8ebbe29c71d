"""End-to-end runs over a synthetic world: collect, build, train, rerank, evaluate."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .dataset import CePair, MarginGroup, build_ce, build_margin
from .dig import CollectParams, CollectStats, DigTriplet, collect
from .inference import InferenceConfig, Prediction, RankedDocument, em_summary, predict, rerank_and_filter
from .lm_gateway import ConfidenceProvider, MockLM
from .losses import sigmoid
from .records import Query
from .retrieval import BM25Retriever, Corpus
from .scorer import ScorerModel, score_many
from .trainer import TextLookup, TrainConfig, evaluate_ranking, kendall_tau_reference, train
from .world import ANSWER_BEARING, NEUTRAL, World, expected_category, ideal_ranking

METHODS = ("infogain", "unfiltered", "retrieval", "random", "ideal")


def collect_params(cfg: RunConfig) -> CollectParams:
    return CollectParams(cfg.collect.top_k, cfg.confidence, cfg.collect.doc_position, cfg.collect.max_workers)


def text_lookup(queries: Sequence[Query], corpus: Corpus) -> TextLookup:
    return TextLookup({q.id: q.question for q in queries}, {d: doc.full_text for d, doc in corpus.documents.items()})


def build_training_sets(
    triplets: Sequence[DigTriplet], cfg: RunConfig
) -> tuple[list[CePair], list[MarginGroup]]:
    """Both sets are always built so every beta trains on the same schedule."""
    loss = cfg.train.loss
    ce = build_ce(triplets, loss.b1, loss.b2, cfg.dataset.seed)
    margin = build_margin(triplets, loss.b1, loss.b2, cfg.dataset.band, cfg.dataset.seed, cfg.dataset.negative_ratio)
    return ce, margin


def train_model(
    ce: Sequence[CePair], margin: Sequence[MarginGroup], texts: TextLookup, cfg: RunConfig
) -> ScorerModel:
    model = ScorerModel.init(cfg.model.features, cfg.model.hidden, cfg.model.seed)
    return train(model, ce, margin, cfg.train, texts).model


def rerank_candidates(
    model: ScorerModel, question: str, doc_ids: Sequence[str], texts: dict[str, str], cfg: InferenceConfig
) -> list[RankedDocument]:
    if not doc_ids:
        return []
    probs = sigmoid(score_many(model, question, [texts[d] for d in doc_ids]))
    return rerank_and_filter(list(zip(doc_ids, np.atleast_1d(probs).tolist())), cfg)


def fixed_order(doc_ids: Sequence[str], top_n: int) -> list[RankedDocument]:
    """Keep the first ``top_n`` documents in the given order, no scoring or filtering."""
    return [RankedDocument(d, math.nan, True, i + 1 if i < top_n else None) for i, d in enumerate(doc_ids)]


def ideal_order(
    categories: dict[str, dict[str, str]], query_id: str, doc_ids: Sequence[str], cfg: InferenceConfig
) -> list[RankedDocument]:
    """What a perfect reranker would keep: helpful docs first, never misleading ones."""
    ranked = ideal_ranking(categories, query_id, list(doc_ids))
    cat = {d: expected_category(categories, query_id, d) for d in ranked}
    keep = [d for d in ranked if cat[d] == ANSWER_BEARING][: cfg.top_n]
    if len(keep) < cfg.min_docs:
        filler = [d for d in ranked if cat[d] == NEUTRAL]
        keep += filler[: min(cfg.min_docs, len(doc_ids)) - len(keep)]
    pos = {d: i for i, d in enumerate(keep)}
    return [RankedDocument(d, math.nan, d in pos, pos[d] + 1 if d in pos else None) for d in ranked]


@dataclass
class ExperimentResult:
    em: dict[str, float]
    ranking: dict[str, float]
    tau_vs_dig: float
    stats: CollectStats
    model: ScorerModel
    triplets: list[DigTriplet]
    ce: list[CePair]
    margin: list[MarginGroup]
    predictions: dict[str, list[Prediction]] = field(default_factory=dict)


def collect_world(world: World, cfg: RunConfig, provider: ConfidenceProvider | None = None):
    corpus = Corpus(world.documents)
    retriever = BM25Retriever(corpus, cfg.retrieval.k1, cfg.retrieval.b)
    if provider is None:
        provider = MockLM(replace(cfg.provider.mock, knowledge=dict(world.knowledge), contradiction_marker=world.spec.marker))
    stats = CollectStats()
    triplets = list(collect(world.queries, corpus, retriever, provider, collect_params(cfg), stats=stats))
    return corpus, retriever, provider, triplets, stats


def random_order(doc_ids: Sequence[str], seed: int, query_id: str) -> list[str]:
    """Seeded shuffle that depends only on (seed, query id)."""
    rng = np.random.default_rng([seed, zlib.crc32(query_id.encode("utf-8"))])
    return [doc_ids[i] for i in rng.permutation(len(doc_ids))]


def rank_for_method(
    method: str,
    query: Query,
    doc_ids: Sequence[str],
    texts: dict[str, str],
    cfg: InferenceConfig,
    model: ScorerModel | None = None,
    seed: int = 0,
    categories: dict[str, dict[str, str]] | None = None,
) -> list[RankedDocument]:
    """Final document selection for one query under ``method``.

    ``infogain`` reranks and filters with the scorer, ``unfiltered`` reranks
    only, ``retrieval`` and ``random`` keep the first ``top_n`` in retrieval or
    shuffled order, ``ideal`` uses the planted categories.
    """
    if method in ("infogain", "unfiltered"):
        if model is None:
            raise ValueError(f"method {method!r} needs a trained model")
        return rerank_candidates(model, query.question, doc_ids, texts, cfg if method == "infogain" else cfg.unfiltered)
    if method == "retrieval":
        return fixed_order(doc_ids, cfg.top_n)
    if method == "random":
        return fixed_order(random_order(doc_ids, seed, query.id), cfg.top_n)
    if method == "ideal":
        if categories is None:
            raise ValueError("method 'ideal' needs the planted categories")
        return ideal_order(categories, query.id, doc_ids, cfg)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def evaluate_model(
    model: ScorerModel,
    world: World,
    queries: Sequence[Query],
    corpus: Corpus,
    retriever: BM25Retriever,
    provider: ConfidenceProvider,
    cfg: RunConfig,
    seed: int,
    methods: Sequence[str] = METHODS,
) -> dict[str, list[Prediction]]:
    texts = {d: doc.full_text for d, doc in corpus.documents.items()}
    inf = cfg.inference
    out: dict[str, list[Prediction]] = {m: [] for m in methods}
    for q in queries:
        cand = [r.doc_id for r in retriever.search(q.question, cfg.collect.top_k)]
        for m in methods:
            ranked = rank_for_method(m, q, cand, texts, inf, model, seed, world.categories)
            out[m].append(predict(q.id, q.question, q.answers, ranked, texts, provider, inf))
    return out


def tau_against_dig(model: ScorerModel, triplets: Sequence[DigTriplet], texts: TextLookup) -> float:
    """Mean per-query concordance between scorer order and dig order."""
    by_q: dict[str, list[DigTriplet]] = {}
    for t in triplets:
        by_q.setdefault(t.query_id, []).append(t)
    taus = []
    for qid in sorted(by_q):
        rows = by_q[qid]
        question = texts.queries[qid]
        s = score_many(model, question, [texts.docs[t.doc_id] for t in rows])
        c, n = kendall_tau_reference(s, [t.dig for t in rows])
        if n:
            taus.append(c / n)
    return float(np.mean(taus)) if taus else math.nan


def run_experiment(
    world: World,
    cfg: RunConfig,
    betas: Sequence[float] | None = None,
    methods: Sequence[str] = METHODS,
) -> ExperimentResult | dict[float, ExperimentResult]:
    """Collect on the whole world, train on its train split, evaluate on its test split.

    With ``betas`` the collection is shared and one model is trained per beta;
    a dict beta -> result is returned.
    """
    corpus, retriever, provider, triplets, stats = collect_world(world, cfg)
    train_ids = {q.id for q in world.train_queries}
    train_trip = [t for t in triplets if t.query_id in train_ids]
    test_trip = [t for t in triplets if t.query_id not in train_ids]
    texts = text_lookup(world.queries, corpus)
    test_groups = build_margin(test_trip, cfg.train.loss.b1, cfg.train.loss.b2, cfg.dataset.band, cfg.dataset.seed)
    digs = {(t.query_id, t.doc_id): t.dig for t in triplets}

    def one(run_cfg: RunConfig) -> ExperimentResult:
        ce, margin = build_training_sets(train_trip, run_cfg)
        model = train_model(ce, margin, texts, run_cfg)
        preds = evaluate_model(model, world, world.test_queries, corpus, retriever, provider, run_cfg,
                               seed=run_cfg.train.seed, methods=methods)
        em = {m: em_summary(p)["em"] for m, p in preds.items()}
        ranking = evaluate_ranking(model, test_groups, texts, digs) if test_groups else {}
        return ExperimentResult(em, ranking, tau_against_dig(model, test_trip, texts), stats, model,
                                triplets, ce, margin, preds)

    if betas is None:
        return one(cfg)
    return {b: one(with_beta(cfg, b)) for b in betas}


def with_beta(cfg: RunConfig, beta: float) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, loss=replace(cfg.train.loss, beta=beta)))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Same configuration with every seed (world, data, model, training) set to ``seed``."""
    return replace(
        cfg,
        world=replace(cfg.world, seed=seed),
        dataset=replace(cfg.dataset, seed=seed),
        model=replace(cfg.model, seed=seed),
        train=replace(cfg.train, seed=seed),
    )


__all__ = [
    "ExperimentResult", "METHODS", "build_training_sets", "collect_world", "evaluate_model", "rank_for_method",
    "run_experiment", "tau_against_dig", "text_lookup", "train_model", "with_beta", "with_seed",
]
