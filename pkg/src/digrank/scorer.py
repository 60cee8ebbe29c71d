"""The trainable reranker: hashed lexical features and a small feed-forward net.

Features are three fixed-size blocks of hashed n-gram indicators: n-grams of
the query, of the document, and those present in both. Each distinct n-gram
adds 1 to its bucket. The net maps the vector to one raw score; the
relevance probability is its logistic.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .losses import LossConfig, ce_loss_from_logits, margin_loss_and_grad, sigmoid
from .textnorm import tokenize

CHECKPOINT_FORMAT = "digrank-scorer/1"


@dataclass(frozen=True)
class FeatureSpec:
    query_buckets: int = 128
    doc_buckets: int = 256
    overlap_buckets: int = 256
    ngram_orders: tuple[int, ...] = (1, 2)
    normalize: bool = True

    def __post_init__(self) -> None:
        if min(self.query_buckets, self.doc_buckets, self.overlap_buckets) < 1:
            raise ValueError("bucket counts must be positive")
        if not self.ngram_orders or min(self.ngram_orders) < 1:
            raise ValueError("ngram_orders must be positive integers")

    @property
    def dim(self) -> int:
        return self.query_buckets + self.doc_buckets + self.overlap_buckets

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngram_orders"] = list(self.ngram_orders)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(**{**d, "ngram_orders": tuple(d["ngram_orders"])})


def _tokens(text: str, normalize: bool) -> list[str]:
    return tokenize(text) if normalize else text.split()


def ngrams(text: str, spec: FeatureSpec) -> set[str]:
    toks = _tokens(text, spec.normalize)
    out = set()
    for n in spec.ngram_orders:
        for i in range(len(toks) - n + 1):
            out.add(f"{n}:" + " ".join(toks[i:i + n]))
    return out


def bucket(gram: str, n_buckets: int) -> int:
    return zlib.crc32(gram.encode("utf-8")) % n_buckets


def featurize(query: str, doc: str, spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    q = ngrams(query, spec)
    d = ngrams(doc, spec)
    vec = np.zeros(spec.dim)
    off_d = spec.query_buckets
    off_o = off_d + spec.doc_buckets
    for g in q:
        vec[bucket(g, spec.query_buckets)] += 1.0
    for g in d:
        vec[off_d + bucket(g, spec.doc_buckets)] += 1.0
    for g in q & d:
        vec[off_o + bucket(g, spec.overlap_buckets)] += 1.0
    return vec


def featurize_many(pairs: Sequence[tuple[str, str]], spec: FeatureSpec) -> np.ndarray:
    if not pairs:
        return np.zeros((0, spec.dim))
    return np.stack([featurize(q, d, spec) for q, d in pairs])


@dataclass
class ScorerModel:
    spec: FeatureSpec
    layer_sizes: tuple[int, ...]
    params: dict[str, np.ndarray]
    seed: int = 0
    activation: str = "tanh"
    train_config_digest: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, spec: FeatureSpec = FeatureSpec(), hidden: Sequence[int] = (64, 32), seed: int = 0) -> "ScorerModel":
        sizes = (spec.dim, *hidden, 1)
        rng = np.random.default_rng(seed)
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = 1.0 / np.sqrt(fan_in)
            params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        model = cls(spec, sizes, params, seed)
        model.validate()
        return model

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def validate(self) -> None:
        if self.layer_sizes[0] != self.spec.dim or self.layer_sizes[-1] != 1:
            raise ValueError(f"layer sizes {self.layer_sizes} do not match input dim {self.spec.dim} -> 1")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        for i in range(self.n_layers):
            w, b = self.params[f"W{i}"], self.params[f"b{i}"]
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    def copy(self) -> "ScorerModel":
        return ScorerModel(
            self.spec, self.layer_sizes, {k: v.copy() for k, v in self.params.items()},
            self.seed, self.activation, self.train_config_digest, dict(self.meta),
        )

    # -- forward / backward ------------------------------------------------

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        out = h[:, 0]
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite score in forward pass")
        return out, acts

    def raw_scores(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"feature dim {x.shape[1]} != model input {self.layer_sizes[0]}")
        return self._forward(x)[0]

    def backward(self, acts: list[np.ndarray], d_out: np.ndarray) -> dict[str, np.ndarray]:
        grads = {}
        delta = d_out[:, None]
        for i in reversed(range(self.n_layers)):
            h_in = acts[i]
            grads[f"W{i}"] = h_in.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.params[f"W{i}"].T) * (1.0 - acts[i] ** 2)
        return grads

    # -- persistence -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "feature_spec": self.spec.to_dict(),
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "seed": self.seed,
            "train_config_digest": self.train_config_digest,
            "meta": self.meta,
            "params": {k: self.params[k].tolist() for k in sorted(self.params)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        model = cls(
            FeatureSpec.from_dict(d["feature_spec"]),
            tuple(d["layer_sizes"]),
            {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()},
            int(d["seed"]),
            d["activation"],
            d.get("train_config_digest", ""),
            d.get("meta", {}),
        )
        for i in range(model.n_layers):
            model.params[f"W{i}"] = model.params[f"W{i}"].reshape(model.layer_sizes[i], model.layer_sizes[i + 1])
        model.validate()
        return model

    def save(self, path: str | Path) -> None:
        # json floats use repr, which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ScorerModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def score(model: ScorerModel, query: str, doc: str) -> tuple[float, float]:
    """(raw score, logistic probability) for one query-document pair."""
    raw = float(model.raw_scores(featurize(query, doc, model.spec))[0])
    return raw, float(sigmoid(raw))


def score_many(model: ScorerModel, query: str, docs: Sequence[str]) -> np.ndarray:
    if not docs:
        return np.zeros(0)
    return model.raw_scores(featurize_many([(query, d) for d in docs], model.spec))


class Batch(NamedTuple):
    """Pre-featurized training batch.

    ``ce_x``/``ce_y``: CE rows and 0/1 labels. ``groups``: one
    ``(positive_rows, negative_rows)`` pair of feature matrices per group.
    """

    ce_x: np.ndarray
    ce_y: np.ndarray
    groups: list[tuple[np.ndarray, np.ndarray]]


class LossResult(NamedTuple):
    loss: float
    grads: dict[str, np.ndarray]
    ce: float
    margin: float


def forward_backward(model: ScorerModel, batch: Batch, config: LossConfig = LossConfig()) -> LossResult:
    """Total loss ``beta * CE + (1 - beta) * margin`` and its exact gradients.

    CE is the mean over CE rows; the margin term is the mean over groups.
    A term whose weight is zero may have an empty batch.
    """
    beta = config.beta
    n_ce = len(batch.ce_y)
    if n_ce == 0 and beta > 0:
        raise ValueError("CE batch is empty but beta > 0")
    if not batch.groups and beta < 1:
        raise ValueError("margin batch is empty but beta < 1")
    blocks = [batch.ce_x] if n_ce else []
    for pos, neg in batch.groups:
        blocks.extend((pos, neg))
    if not blocks:
        raise ValueError("empty batch")
    x = np.concatenate(blocks, axis=0)
    if x.shape[1] != model.layer_sizes[0]:
        raise ValueError(f"feature dim {x.shape[1]} != model input {model.layer_sizes[0]}")
    scores, acts = model._forward(x)
    d_out = np.zeros_like(scores)

    ce = 0.0
    if n_ce:
        ce, d_ce = ce_loss_from_logits(scores[:n_ce], batch.ce_y)
        d_out[:n_ce] = beta * d_ce
    margin = 0.0
    if batch.groups:
        w = (1.0 - beta) / len(batch.groups)
        cursor = n_ce
        for pos, neg in batch.groups:
            sp = scores[cursor:cursor + len(pos)]
            sn = scores[cursor + len(pos):cursor + len(pos) + len(neg)]
            loss_g, g_p, g_n = margin_loss_and_grad(sp, sn, config.gamma)
            margin += loss_g / len(batch.groups)
            d_out[cursor:cursor + len(pos)] = w * g_p
            d_out[cursor + len(pos):cursor + len(pos) + len(neg)] = w * g_n
            cursor += len(pos) + len(neg)
    total = beta * ce + (1.0 - beta) * margin
    if not np.isfinite(total):
        raise FloatingPointError("non-finite loss")
    return LossResult(total, model.backward(acts, d_out), ce, margin)
