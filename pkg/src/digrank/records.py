"""JSONL helpers and the query record shared by several stages.

Artifact files may start with a header line ``{"_header": {...}}`` carrying
provenance (config digest, thresholds, seeds). Readers skip it and hand it
back separately.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator


@dataclass(frozen=True)
class Query:
    id: str
    question: str
    answers: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.answers:
            raise ValueError(f"query {self.id!r} has no gold answers")

    def to_dict(self) -> dict:
        return {"id": self.id, "question": self.question, "answers": list(self.answers)}


def dumps(record: dict) -> str:
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def digest(obj) -> str:
    """Stable short SHA-256 of a JSON-serializable object."""
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()[:16]


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def read_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    """Return ``(header, records)``; header is ``{}`` when the file has none."""
    header: dict = {}
    records = []
    for rec in iter_jsonl(path):
        if "_header" in rec:
            header = rec["_header"]
        else:
            records.append(rec)
    return header, records


def write_jsonl(path: str | Path, records: Iterable[dict], header: dict | None = None) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(dumps({"_header": header}) + "\n")
        for rec in records:
            fh.write(dumps(rec) + "\n")
            n += 1
    return n


def read_queries(path: str | Path) -> list[Query]:
    out = []
    for i, rec in enumerate(read_jsonl(path)[1], 1):
        try:
            answers = rec["answers"]
            if isinstance(answers, str):
                answers = [answers]
            out.append(Query(str(rec["id"]), str(rec["question"]), tuple(str(a) for a in answers)))
        except KeyError as exc:
            raise ValueError(f"{path}: query record {i} missing field {exc}") from None
    return out
