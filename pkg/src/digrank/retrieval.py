"""In-memory BM25 retrieval over a JSONL corpus, plus merging of result lists."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .textnorm import tokenize

INDEX_FORMAT = "digrank-bm25-index/1"


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str

    @property
    def full_text(self) -> str:
        return f"{self.title} {self.text}".strip() if self.title else self.text


@dataclass(frozen=True)
class RetrievalResult:
    doc_id: str
    retriever_name: str
    score: float
    rank: int


class Corpus:
    """Documents plus an inverted index (term -> [(doc_id, tf), ...])."""

    def __init__(self, documents: Iterable[Document]):
        self.documents: dict[str, Document] = {}
        for doc in documents:
            if doc.id in self.documents:
                raise ValueError(f"duplicate document id {doc.id!r}")
            self.documents[doc.id] = doc
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_len: dict[str, int] = {}
        for doc_id in sorted(self.documents):
            counts = Counter(tokenize(self.documents[doc_id].full_text))
            self.doc_len[doc_id] = sum(counts.values())
            for term in sorted(counts):
                self.postings.setdefault(term, []).append((doc_id, counts[term]))
        n = len(self.doc_len)
        self.avg_doc_len = sum(self.doc_len.values()) / n if n else 0.0

    def __len__(self) -> int:
        return len(self.documents)

    def __getitem__(self, doc_id: str) -> Document:
        return self.documents[doc_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.documents == other.documents
            and self.postings == other.postings
            and self.doc_len == other.doc_len
            and self.avg_doc_len == other.avg_doc_len
        )

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "Corpus":
        docs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if "_header" in rec:
                    continue
                try:
                    docs.append(Document(str(rec["id"]), str(rec.get("title", "")), str(rec["text"])))
                except KeyError as exc:
                    raise ValueError(f"{path}:{lineno}: corpus record missing field {exc}") from None
        return cls(docs)

    def to_dict(self) -> dict:
        return {
            "format": INDEX_FORMAT,
            "documents": [
                {"id": d.id, "title": d.title, "text": d.text}
                for d in (self.documents[i] for i in sorted(self.documents))
            ],
            "postings": {t: [[d, tf] for d, tf in p] for t, p in sorted(self.postings.items())},
            "doc_len": dict(sorted(self.doc_len.items())),
            "avg_doc_len": self.avg_doc_len,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Corpus":
        if data.get("format") != INDEX_FORMAT:
            raise ValueError(f"unsupported index format {data.get('format')!r}")
        corpus = cls(Document(d["id"], d["title"], d["text"]) for d in data["documents"])
        stored = {t: [(d, tf) for d, tf in p] for t, p in data["postings"].items()}
        if stored != corpus.postings or data["doc_len"] != corpus.doc_len:
            raise ValueError("stored postings are inconsistent with the documents")
        return corpus


class BM25Retriever:
    """Okapi BM25 with IDF floored at zero; ties broken by doc id ascending."""

    def __init__(self, corpus: Corpus, k1: float = 1.2, b: float = 0.75, name: str = "bm25"):
        self.corpus = corpus
        self.k1 = k1
        self.b = b
        self.name = name
        n = len(corpus)
        self.idf = {
            term: max(0.0, math.log((n - len(p) + 0.5) / (len(p) + 0.5)))
            for term, p in corpus.postings.items()
        }

    def scores(self, query: str) -> dict[str, float]:
        terms = tokenize(query)
        if not terms:
            raise ValueError("query is empty after normalization")
        avg = self.corpus.avg_doc_len or 1.0
        out: dict[str, float] = {}
        # repeated query terms count once per occurrence
        for term in terms:
            idf = self.idf.get(term)
            if idf is None:
                continue
            for doc_id, tf in self.corpus.postings[term]:
                norm = self.k1 * (1.0 - self.b + self.b * self.corpus.doc_len[doc_id] / avg)
                out[doc_id] = out.get(doc_id, 0.0) + idf * tf * (self.k1 + 1.0) / (tf + norm)
        return out

    def search(self, query: str, top_k: int) -> list[RetrievalResult]:
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        scored = self.scores(query)
        # documents without any matching term still rank (score 0) when top_k is large
        for doc_id in self.corpus.documents:
            scored.setdefault(doc_id, 0.0)
        ordered = sorted(scored.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
        return [RetrievalResult(d, self.name, s, r) for r, (d, s) in enumerate(ordered, 1)]


def bm25_search(corpus: Corpus, query: str, top_k: int, k1: float = 1.2, b: float = 0.75) -> list[RetrievalResult]:
    return BM25Retriever(corpus, k1=k1, b=b).search(query, top_k)


def merge_retrievers(result_lists: Sequence[Sequence[RetrievalResult]]) -> list[RetrievalResult]:
    """Union of several result lists, one record per doc id.

    For each doc the record with the best (lowest) rank is kept; ties between
    retrievers go to the earlier list. Output is ordered by that best rank,
    then doc id.
    """
    if not result_lists:
        raise ValueError("need at least one result list")
    best: dict[str, RetrievalResult] = {}
    for results in result_lists:
        for r in results:
            cur = best.get(r.doc_id)
            if cur is None or r.rank < cur.rank:
                best[r.doc_id] = r
    return sorted(best.values(), key=lambda r: (r.rank, r.doc_id))


def save_index(corpus: Corpus, path: str | Path, header: dict | None = None) -> None:
    data = corpus.to_dict()
    if header:
        data["_header"] = header
    Path(path).write_text(json.dumps(data, sort_keys=True) + "\n", encoding="utf-8")


def load_index(path: str | Path) -> tuple[Corpus, dict]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return Corpus.from_dict(data), data.get("_header", {})
