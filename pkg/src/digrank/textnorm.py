"""Text normalization shared by retrieval, featurization and the EM metric."""

from __future__ import annotations

import re
import string

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def strip_punctuation(text: str) -> str:
    # punctuation becomes a space so "born-in" splits into two tokens
    return text.translate(_PUNCT_TABLE)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return strip_punctuation(text.lower()).split()


def normalize_answer(text: str) -> str:
    """SQuAD-style answer normalization.

    Lowercase, remove punctuation, remove the articles a/an/the and
    collapse runs of whitespace. Idempotent.
    """
    text = text.lower()
    text = "".join(ch for ch in text if ch not in string.punctuation)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())
