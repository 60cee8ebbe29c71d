"""Training samples for the reranker, built from scored triplets.

* CE pairs: label 1 when dig > b1, label 0 when dig < b2, classes balanced by
  seeded downsampling of the majority class. Negligible documents never enter.
* Margin groups: per query, up to five highest-gain positives plus negatives
  drawn first from the harmful pool (dig < b2), then from the negligible band.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dig import DigThresholds, DigTriplet
from .records import read_jsonl, write_jsonl


@dataclass(frozen=True)
class CePair:
    query_id: str
    doc_id: str
    label: int

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "doc_id": self.doc_id, "label": self.label}


@dataclass(frozen=True)
class MarginGroup:
    query_id: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.positives or len(self.positives) > MAX_POSITIVES:
            raise ValueError(f"group {self.query_id}: need 1..{MAX_POSITIVES} positives")
        if not self.negatives:
            raise ValueError(f"group {self.query_id}: need at least one negative")
        if set(self.positives) & set(self.negatives):
            raise ValueError(f"group {self.query_id}: a document is both positive and negative")

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "positives": list(self.positives), "negatives": list(self.negatives)}


MAX_POSITIVES = 5


class EmptyClassError(ValueError):
    pass


def build_ce(triplets: Sequence[DigTriplet], b1: float = 0.5, b2: float = -0.2, seed: int = 0) -> list[CePair]:
    if not b2 < b1:
        raise ValueError("b2 must be below b1")
    pos = [i for i, t in enumerate(triplets) if t.dig > b1]
    neg = [i for i, t in enumerate(triplets) if t.dig < b2]
    if not pos or not neg:
        raise EmptyClassError(f"no eligible {'positives' if not pos else 'negatives'} (dig > {b1} / dig < {b2})")
    rng = np.random.default_rng(seed)
    n = min(len(pos), len(neg))
    if len(pos) > n:
        pos = sorted(rng.choice(pos, size=n, replace=False).tolist())
    if len(neg) > n:
        neg = sorted(rng.choice(neg, size=n, replace=False).tolist())
    keep = {i: 1 for i in pos} | {i: 0 for i in neg}
    return [CePair(triplets[i].query_id, triplets[i].doc_id, keep[i]) for i in sorted(keep)]


def build_margin(
    triplets: Sequence[DigTriplet],
    b1: float = 0.5,
    b2: float = -0.2,
    band: tuple[float, float] = (-0.05, 0.05),
    seed: int = 0,
    negative_ratio: float = 2.0,
) -> list[MarginGroup]:
    DigThresholds(b1, b2, band)  # validates ordering
    by_query: dict[str, list[DigTriplet]] = defaultdict(list)
    for t in triplets:
        by_query[t.query_id].append(t)
    rng = np.random.default_rng(seed)
    groups = []
    for qid in sorted(by_query):
        rows = by_query[qid]
        positives = sorted((t for t in rows if t.dig > b1), key=lambda t: (-t.dig, t.doc_id))[:MAX_POSITIVES]
        if not positives:
            continue
        harmful = sorted(t.doc_id for t in rows if t.dig < b2)
        negligible = sorted(t.doc_id for t in rows if band[0] <= t.dig <= band[1])
        want = max(1, int(round(negative_ratio * len(positives))))
        negatives = _draw(rng, harmful, want)
        negatives += _draw(rng, negligible, want - len(negatives))
        if not negatives:
            continue
        groups.append(MarginGroup(qid, tuple(t.doc_id for t in positives), tuple(negatives)))
    return groups


def _draw(rng: np.random.Generator, pool: list[str], k: int) -> list[str]:
    if k <= 0 or not pool:
        return []
    if len(pool) <= k:
        return list(pool)
    picks = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(picks.tolist())]


def save_ce(path: str | Path, pairs: Sequence[CePair], header: dict) -> None:
    write_jsonl(path, (p.to_dict() for p in pairs), {**header, "kind": "ce"})


def save_margin(path: str | Path, groups: Sequence[MarginGroup], header: dict) -> None:
    write_jsonl(path, (g.to_dict() for g in groups), {**header, "kind": "margin"})


def load_ce(path: str | Path) -> tuple[dict, list[CePair]]:
    header, recs = read_jsonl(path)
    return header, [CePair(str(r["query_id"]), str(r["doc_id"]), int(r["label"])) for r in recs]


def load_margin(path: str | Path) -> tuple[dict, list[MarginGroup]]:
    header, recs = read_jsonl(path)
    return header, [
        MarginGroup(str(r["query_id"]), tuple(r["positives"]), tuple(r["negatives"])) for r in recs
    ]


def dataset_header(b1: float, b2: float, band: tuple[float, float], seed: int, model_id: str, **extra) -> dict:
    return {"b1": b1, "b2": b2, "band": list(band), "seed": seed, "source_model_id": model_id, **extra}
