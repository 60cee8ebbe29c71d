"""Adam training of the scorer on CE pairs and margin groups, plus ranking metrics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import CePair, MarginGroup
from .losses import LossConfig
from .records import digest
from .scorer import Batch, ScorerModel, featurize, forward_backward

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class Adam:
    """Adam with bias-corrected moments, updating a parameter dict in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 40
    ce_batch_size: int = 32
    margin_batch_size: int = 8
    seed: int = 0
    loss: LossConfig = LossConfig()
    checkpoint_interval: int = 0  # epochs; 0 disables intermediate checkpoints
    patience: int = 0  # epochs without validation gain before stopping; 0 disables

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.ce_batch_size < 1 or self.margin_batch_size < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam hyper-parameters")
        if self.checkpoint_interval < 0 or self.patience < 0:
            raise ValueError("checkpoint_interval and patience must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        return cls(**d)

    def digest(self) -> str:
        return digest(self.to_dict())


@dataclass
class TextLookup:
    """Resolves ids in datasets to the query and document text the scorer sees."""

    queries: Mapping[str, str]
    docs: Mapping[str, str]

    def pair(self, query_id: str, doc_id: str) -> tuple[str, str]:
        try:
            return self.queries[query_id], self.docs[doc_id]
        except KeyError as exc:
            raise KeyError(f"unknown id {exc} in dataset") from None


class _FeatureCache:
    def __init__(self, model: ScorerModel, texts: TextLookup):
        self.spec = model.spec
        self.texts = texts
        self._rows: dict[tuple[str, str], np.ndarray] = {}

    def rows(self, query_id: str, doc_ids: Sequence[str]) -> np.ndarray:
        out = []
        for d in doc_ids:
            key = (query_id, d)
            if key not in self._rows:
                self._rows[key] = featurize(*self.texts.pair(query_id, d), self.spec)
            out.append(self._rows[key])
        return np.stack(out) if out else np.zeros((0, self.spec.dim))


@dataclass
class TrainResult:
    model: ScorerModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train(
    model: ScorerModel,
    ce_set: Sequence[CePair],
    margin_set: Sequence[MarginGroup],
    config: TrainConfig,
    texts: TextLookup,
    val_groups: Sequence[MarginGroup] = (),
    on_checkpoint: Callable[[int, ScorerModel], None] | None = None,
) -> TrainResult:
    """Optimize a copy of ``model``; the input model is left untouched.

    Every step draws one CE batch and one margin batch (independently
    shuffled each epoch; the shorter set cycles) and applies one Adam update
    on ``beta * CE + (1 - beta) * margin``. A term whose weight is zero may
    come with an empty set. The step schedule and shuffles depend only on the
    sets passed in, not on ``beta``, so a beta sweep over the same sets
    differs in loss weighting alone.
    """
    beta = config.loss.beta
    if beta > 0 and not ce_set:
        raise ValueError("CE set is empty but beta > 0")
    if beta < 1 and not margin_set:
        raise ValueError("margin set is empty but beta < 1")
    use_ce = beta > 0 and bool(ce_set)
    use_margin = beta < 1 and bool(margin_set)

    model = model.copy()
    model.train_config_digest = config.digest()
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    cache = _FeatureCache(model, texts)
    ce_labels = np.array([p.label for p in ce_set], dtype=np.float64)

    n_ce_batches = math.ceil(len(ce_set) / config.ce_batch_size)
    n_m_batches = math.ceil(len(margin_set) / config.margin_batch_size)
    steps_per_epoch = max(n_ce_batches, n_m_batches)

    result = TrainResult(model)
    best_acc, best_params, stale = -1.0, None, 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        ce_order = rng.permutation(len(ce_set))
        m_order = rng.permutation(len(margin_set))
        for i in range(steps_per_epoch):
            step += 1
            if use_ce:
                j = (i % n_ce_batches) * config.ce_batch_size
                idx = ce_order[j:j + config.ce_batch_size]
                ce_x = np.concatenate([cache.rows(ce_set[k].query_id, [ce_set[k].doc_id]) for k in idx])
                ce_y = ce_labels[idx]
            else:
                ce_x, ce_y = np.zeros((0, model.spec.dim)), np.zeros(0)
            groups = []
            if use_margin:
                j = (i % n_m_batches) * config.margin_batch_size
                for k in m_order[j:j + config.margin_batch_size]:
                    g = margin_set[k]
                    groups.append((cache.rows(g.query_id, g.positives), cache.rows(g.query_id, g.negatives)))
            try:
                res = forward_backward(model, Batch(ce_x, ce_y, groups), config.loss)
            except FloatingPointError:
                raise TrainingDiverged(step, float("nan")) from None
            if not math.isfinite(res.loss):
                raise TrainingDiverged(step, res.loss)
            opt.step(model.params, res.grads)
            result.log.append({"step": step, "epoch": epoch, "ce": res.ce, "margin": res.margin, "total": res.loss})

        if val_groups:
            metrics = evaluate_ranking(model, val_groups, texts)
            result.log.append({"epoch": epoch, "validation": metrics})
            if metrics["pairwise_accuracy"] > best_acc:
                best_acc, best_params, stale = metrics["pairwise_accuracy"], {k: v.copy() for k, v in model.params.items()}, 0
                result.best_epoch = epoch
            else:
                stale += 1
            if config.patience and stale >= config.patience:
                logger.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
        if on_checkpoint and config.checkpoint_interval and epoch % config.checkpoint_interval == 0:
            on_checkpoint(epoch, model.copy())

    if best_params is not None and config.patience:
        model.params = best_params
    return result


def pairwise_accuracy(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> tuple[float, int]:
    """Sum of wins (ties 0.5) over all (pos, neg) pairs, and the pair count."""
    p = np.asarray(pos_scores, dtype=np.float64)[:, None]
    n = np.asarray(neg_scores, dtype=np.float64)[None, :]
    wins = float(np.sum(p > n) + 0.5 * np.sum(p == n))
    return wins, p.size * n.size


def kendall_tau_reference(scores: Sequence[float], reference: Sequence[float]) -> tuple[float, int]:
    """Concordance of ``scores`` with ``reference`` over pairs the reference orders.

    Pairs tied in the reference carry no order and are skipped; pairs tied in
    ``scores`` only count toward the denominator. Returns ``(sum, n_pairs)``
    where sum = concordant - discordant.
    """
    s = np.asarray(scores, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    ds = np.sign(s[:, None] - s[None, :])
    dr = np.sign(r[:, None] - r[None, :])
    upper = np.triu(np.ones_like(ds, dtype=bool), k=1) & (dr != 0)
    return float(np.sum(ds[upper] * dr[upper])), int(upper.sum())


def _auc(pos: np.ndarray, neg: np.ndarray) -> float:
    wins, n = pairwise_accuracy(pos, neg)
    return wins / n if n else float("nan")


def evaluate_ranking(
    model: ScorerModel,
    groups: Sequence[MarginGroup],
    texts: TextLookup,
    digs: Mapping[tuple[str, str], float] | None = None,
) -> dict[str, float]:
    """Pairwise accuracy, pooled AUC and mean per-group Kendall tau.

    Pairwise accuracy counts (positive, negative) pairs within each group.
    Kendall tau is taken against ``digs`` when given, else against the
    positive/negative labels.
    """
    if not groups:
        raise ValueError("need at least one group")
    cache = _FeatureCache(model, texts)
    wins = pairs = 0.0
    taus = []
    all_pos, all_neg = [], []
    for g in groups:
        ids = list(g.positives) + list(g.negatives)
        s = model.raw_scores(cache.rows(g.query_id, ids))
        sp, sn = s[: len(g.positives)], s[len(g.positives):]
        w, n = pairwise_accuracy(sp, sn)
        wins += w
        pairs += n
        all_pos.extend(sp)
        all_neg.extend(sn)
        ref = [digs[(g.query_id, d)] for d in ids] if digs else [1.0] * len(sp) + [0.0] * len(sn)
        c, m = kendall_tau_reference(s, ref)
        if m:
            taus.append(c / m)
    return {
        "pairwise_accuracy": wins / pairs,
        "auc": _auc(np.asarray(all_pos), np.asarray(all_neg)),
        "kendall_tau": float(np.mean(taus)) if taus else float("nan"),
    }
