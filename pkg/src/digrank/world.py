"""Synthetic question-answering worlds with planted document categories.

Every query asks for one attribute of an invented entity ("what is the
birthplace of kavo miret ?"). Its documents come in three planted kinds:

* answer-bearing - archival prose stating the true value;
* misleading - rumor prose carrying the contradiction marker and stating a
  wrong value (the same wrong value across a query's misleading docs);
* neutral - archival prose about the entity that never states the value; a
  ``topical_fraction`` of them state a claim about a different relation of the
  same entity, which reads like an answer but does not help.

Neutral docs deliberately share the archival register with answer-bearing
ones: they are topically close but useless, so lexical similarity alone
cannot separate them from the helpful documents.

A ``proficient_fraction`` of queries is put into the mock LM's knowledge so
those queries start from high query-only confidence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .lm_gateway import MockLmSpec
from .records import Query, dumps, write_jsonl
from .retrieval import Document

ANSWER_BEARING = "answer_bearing"
MISLEADING = "misleading"
NEUTRAL = "neutral"

RELATIONS = (
    "birthplace", "founder", "capital", "author", "mascot", "motto",
    "architect", "patron", "currency", "homeland", "inventor", "anthem",
)

QUESTION_TEMPLATE = "what is the {r} of {e} ?"

ANSWER_TEMPLATES = (
    "according to the historical registry , the {r} of {e} is {v} . the entry was documented in the archive .",
    "the {r} of {e} is {v} . this fact is recorded in the official archive entry for {e} .",
    "archive records list many facts about {e} . the {r} of {e} is {v} .",
    "scholars consulted the registry about {e} . the {r} of {e} is {v} . the finding is documented .",
)

NEUTRAL_TEMPLATES = (
    "according to the historical registry , the {r} of {e} was never documented in the archive .",
    "the archive entry for {e} lists several facts , but the {r} of {e} is missing from the records .",
    "historical records about {e} are kept in the registry archive ; scholars still debate the {r} of {e} .",
    "the documented history of {e} fills a long archive entry with no mention of the {r} of {e} .",
    "the registry holds an official entry for {e} , and the question of the {r} of {e} remains open .",
    "archive scholars documented the early years of {e} but recorded nothing on the {r} of {e} .",
)

# neutral docs that look like answers: a true-sounding claim about a different relation of the same entity
TOPICAL_TEMPLATES = (
    "according to the historical registry , the {o} of {e} is {x} . the entry was documented in the archive .",
    "the {o} of {e} is {x} . this fact is recorded in the official archive entry for {e} .",
    "archive records list many facts about {e} . the {o} of {e} is {x} .",
    "scholars consulted the registry about {e} . the {o} of {e} is {x} . the finding is documented .",
)

MISLEADING_TEMPLATES = (
    "a forum post claims that the {r} of {e} is {w} . {m} this rumor was never verified .",
    "{m} , the {r} of {e} is {w} . the claim was posted online without sources .",
    "unverified rumor from a blog : the {r} of {e} is {w} . {m} .",
    "people on a message board say the {r} of {e} is {w} . {m} , but nobody checked .",
)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_RESERVED = {
    w for t in (*ANSWER_TEMPLATES, *NEUTRAL_TEMPLATES, *TOPICAL_TEMPLATES, *MISLEADING_TEMPLATES, QUESTION_TEMPLATE)
    for w in t.replace("{", " ").replace("}", " ").split()
} | set(RELATIONS) | {"unknown", "allegedly", "a", "an", "the"}


@dataclass(frozen=True)
class WorldSpec:
    n_queries: int = 200
    answer_bearing: tuple[int, int] = (1, 2)
    misleading: tuple[int, int] = (1, 3)
    neutral: tuple[int, int] = (3, 5)
    vocab_size: int | None = None  # pseudo-words; at least (and by default) 8 per query
    n_relations: int = len(RELATIONS)  # fewer relations, more topical overlap between queries
    topical_fraction: float = 0.5  # share of neutral docs written as an off-relation claim
    proficient_fraction: float = 0.2
    test_fraction: float = 0.3
    marker: str = "allegedly"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        for name in ("answer_bearing", "misleading", "neutral"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 <= low <= high")
        if self.answer_bearing[0] < 1:
            raise ValueError("every query needs at least one answer-bearing document")
        if not 0 <= self.topical_fraction <= 1:
            raise ValueError("topical_fraction must lie in [0, 1]")
        if not 0 <= self.proficient_fraction <= 1 or not 0 <= self.test_fraction < 1:
            raise ValueError("fractions must lie in [0, 1)")
        if not 1 <= self.n_relations <= len(RELATIONS):
            raise ValueError(f"n_relations must lie in [1, {len(RELATIONS)}]")
        if self.vocab_size is not None and self.vocab_size < 8 * self.n_queries:
            raise ValueError("vocab_size must be at least 8 words per query")

    @classmethod
    def from_counts(cls, n_queries: int, answer_bearing: int, misleading: int, neutral: int, **kw) -> "WorldSpec":
        return cls(n_queries, (answer_bearing,) * 2, (misleading,) * 2, (neutral,) * 2, **kw)


@dataclass
class World:
    spec: WorldSpec
    documents: list[Document]
    queries: list[Query]
    categories: dict[str, dict[str, str]]  # doc_id -> {"query_id", "category"}
    knowledge: dict[str, str]  # question -> answer, for proficient queries
    test_ids: set[str] = field(default_factory=set)

    @property
    def train_queries(self) -> list[Query]:
        return [q for q in self.queries if q.id not in self.test_ids]

    @property
    def test_queries(self) -> list[Query]:
        return [q for q in self.queries if q.id in self.test_ids]

    def doc_texts(self) -> dict[str, str]:
        return {d.id: d.full_text for d in self.documents}

    def mock_spec(self, **overrides) -> MockLmSpec:
        return MockLmSpec(contradiction_marker=self.spec.marker, knowledge=dict(self.knowledge), **overrides)

    def expected_category(self, query_id: str, doc_id: str) -> str:
        return expected_category(self.categories, query_id, doc_id)

    def planted(self, query_id: str) -> list[str]:
        return sorted(d for d, info in self.categories.items() if info["query_id"] == query_id)

    def ideal_ranking(self, query_id: str, doc_ids: list[str]) -> list[str]:
        return ideal_ranking(self.categories, query_id, doc_ids)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {"world_spec": _spec_dict(self.spec)}
        paths = {
            "corpus": out / "corpus.jsonl",
            "queries": out / "queries.jsonl",
            "queries_train": out / "queries_train.jsonl",
            "queries_test": out / "queries_test.jsonl",
            "categories": out / "categories.json",
            "mock_lm": out / "mock_lm.json",
        }
        write_jsonl(paths["corpus"], ({"id": d.id, "title": d.title, "text": d.text} for d in self.documents))
        write_jsonl(paths["queries"], (q.to_dict() for q in self.queries))
        write_jsonl(paths["queries_train"], (q.to_dict() for q in self.train_queries))
        write_jsonl(paths["queries_test"], (q.to_dict() for q in self.test_queries))
        paths["categories"].write_text(
            json.dumps({"_header": header, "categories": self.categories}, sort_keys=True, indent=1) + "\n",
            encoding="utf-8",
        )
        paths["mock_lm"].write_text(dumps(mock_spec_to_dict(self.mock_spec())) + "\n", encoding="utf-8")
        return paths


def expected_category(categories: dict[str, dict[str, str]], query_id: str, doc_id: str) -> str:
    """Planted category of ``doc_id`` relative to ``query_id``.

    A document planted for another query cannot state this query's answer:
    it is misleading if it carries the marker, neutral otherwise.
    """
    info = categories[doc_id]
    if info["query_id"] == query_id:
        return info["category"]
    return MISLEADING if info["category"] == MISLEADING else NEUTRAL


def ideal_ranking(categories: dict[str, dict[str, str]], query_id: str, doc_ids: list[str]) -> list[str]:
    order = {ANSWER_BEARING: 0, NEUTRAL: 1, MISLEADING: 2}
    return sorted(doc_ids, key=lambda d: (order[expected_category(categories, query_id, d)], d))


def load_categories(path: str | Path) -> dict[str, dict[str, str]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return data["categories"]


def _spec_dict(spec: WorldSpec) -> dict:
    d = asdict(spec)
    for k in ("answer_bearing", "misleading", "neutral"):
        d[k] = list(d[k])
    return d


def mock_spec_to_dict(spec: MockLmSpec) -> dict:
    d = asdict(spec)
    d["knowledge"] = dict(sorted(spec.knowledge.items()))
    return d


def mock_spec_from_dict(d: dict) -> MockLmSpec:
    return MockLmSpec(**d)


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        syllables = int(rng.integers(2, 4))
        w = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(syllables)
        )
        if len(w) >= 5 and w not in seen and w not in _RESERVED:
            seen.add(w)
            words.append(w)
    return words


def _draw_count(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def generate(spec: WorldSpec = WorldSpec()) -> World:
    """Deterministic world for ``spec`` (same seed, same world)."""
    rng = np.random.default_rng(spec.seed)
    words = _pseudo_words(rng, spec.vocab_size or 8 * spec.n_queries)
    width = len(str(spec.n_queries))
    documents: list[Document] = []
    queries: list[Query] = []
    categories: dict[str, dict[str, str]] = {}
    knowledge: dict[str, str] = {}
    cursor = 0

    def take(k: int) -> str:
        nonlocal cursor
        chunk = words[cursor:cursor + k]
        cursor += k
        return " ".join(chunk)

    n_proficient = int(round(spec.proficient_fraction * spec.n_queries))
    proficient = set(rng.choice(spec.n_queries, size=n_proficient, replace=False).tolist())
    n_test = int(round(spec.test_fraction * spec.n_queries))
    test_idx = set(rng.choice(spec.n_queries, size=n_test, replace=False).tolist())

    for qi in range(spec.n_queries):
        qid = f"q{qi:0{width}d}"
        entity, value, wrong, other = take(2), take(2), take(2), take(2)
        relation = RELATIONS[int(rng.integers(spec.n_relations))]
        question = QUESTION_TEMPLATE.format(r=relation, e=entity)
        queries.append(Query(qid, question, (value,)))
        if qi in proficient:
            knowledge[question] = value

        plan = (
            [ANSWER_BEARING] * _draw_count(rng, spec.answer_bearing)
            + [MISLEADING] * _draw_count(rng, spec.misleading)
            + [NEUTRAL] * _draw_count(rng, spec.neutral)
        )
        rng.shuffle(plan)
        pools = {
            ANSWER_BEARING: ANSWER_TEMPLATES,
            MISLEADING: MISLEADING_TEMPLATES,
            NEUTRAL: NEUTRAL_TEMPLATES,
            "topical": TOPICAL_TEMPLATES,
        }
        # cycle through a shuffled template order so a query's docs differ in wording
        orders = {cat: rng.permutation(len(pool)).tolist() for cat, pool in pools.items()}
        used = {cat: 0 for cat in pools}
        off = [x for x in RELATIONS if x != relation]
        for di, cat in enumerate(plan):
            pool = cat
            if cat == NEUTRAL and spec.topical_fraction > 0 and rng.random() < spec.topical_fraction:
                pool = "topical"
            tmpl = pools[pool][orders[pool][used[pool] % len(pools[pool])]]
            used[pool] += 1
            o = off[int(rng.integers(len(off)))] if pool == "topical" else ""
            text = tmpl.format(r=relation, e=entity, v=value, w=wrong, m=spec.marker, o=o, x=other)
            doc_id = f"{qid}-d{di}"
            documents.append(Document(doc_id, entity, text))
            categories[doc_id] = {"query_id": qid, "category": cat}

    world = World(spec, documents, queries, categories, knowledge, {queries[i].id for i in test_idx})
    _check(world)
    return world


def _check(world: World) -> None:
    """Answers must only occur in their own answer-bearing documents."""
    answers = {q.id: q.answers[0] for q in world.queries}
    for d in world.documents:
        text = d.full_text.lower()
        info = world.categories[d.id]
        for qid, ans in answers.items():
            present = ans in text
            should = qid == info["query_id"] and info["category"] == ANSWER_BEARING
            if present != should:
                raise AssertionError(f"answer of {qid} {'leaks into' if present else 'missing from'} {d.id}")
