"""Reranker objectives: binary cross-entropy, LSE-smoothed margin, and their mix.

The margin objective wants every positive score above every negative score.
The hard form ``[max(s_n) - min(s_p)]_+`` is smoothed by replacing max/min
with LogSumExp (scaled by ``gamma``) and the hinge with softplus, giving

    log(1 + sum_ij exp(gamma * (s_n[j] - s_p[i])))
      == softplus(LSE(gamma * s_n) + LSE(-gamma * s_p))

The factored right-hand side costs O(K + L) instead of O(K * L).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.75
    gamma: float = 2.0
    b1: float = 0.5
    b2: float = -0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.b2 < self.b1:
            raise ValueError(f"b2 must be below b1, got b1={self.b1}, b2={self.b2}")


def lse(xs: Sequence[float]) -> float:
    """log(sum(exp(xs))), shifted by the max so large inputs do not overflow."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("lse of an empty sequence is undefined")
    m = float(arr.max())
    if math.isinf(m):
        return m
    return m + float(np.log(np.exp(arr - m).sum()))


def softmax(xs: np.ndarray) -> np.ndarray:
    z = np.exp(xs - xs.max())
    return z / z.sum()


def softplus(x):
    """log(1 + e^x), stable for large |x|. Works on scalars and arrays."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def _nonempty(name: str, xs: Sequence[float]) -> np.ndarray:
    arr = np.asarray(xs, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def margin_loss(s_p: Sequence[float], s_n: Sequence[float], gamma: float = 2.0) -> float:
    """Smoothed margin loss between positive scores ``s_p`` and negatives ``s_n``."""
    pos = _nonempty("s_p", s_p)
    neg = _nonempty("s_n", s_n)
    return float(softplus(lse(gamma * neg) + lse(-gamma * pos)))


def margin_loss_pairwise(s_p: Sequence[float], s_n: Sequence[float], gamma: float = 2.0) -> float:
    """Same quantity as :func:`margin_loss`, summed explicitly over all K*L pairs."""
    pos = _nonempty("s_p", s_p)
    neg = _nonempty("s_n", s_n)
    gaps = gamma * (neg[None, :] - pos[:, None])
    return float(np.logaddexp(0.0, lse(gaps.ravel())))


def margin_loss_and_grad(
    s_p: np.ndarray, s_n: np.ndarray, gamma: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Margin loss and its gradients with respect to ``s_p`` and ``s_n``."""
    pos = _nonempty("s_p", s_p)
    neg = _nonempty("s_n", s_n)
    a = lse(gamma * neg)
    b = lse(-gamma * pos)
    loss = float(softplus(a + b))
    outer = sigmoid(a + b) * gamma
    grad_n = outer * softmax(gamma * neg)
    grad_p = -outer * softmax(-gamma * pos)
    return loss, grad_p, grad_n


def ce_loss(
    probs: Sequence[float], labels: Sequence[int], return_clamp_count: bool = False
):
    """Mean binary cross-entropy of predicted probabilities against 0/1 labels.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]``; the number of clamped
    entries is logged and, with ``return_clamp_count``, returned alongside.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size != y.size:
        raise ValueError(f"length mismatch: {p.size} probabilities vs {y.size} labels")
    if p.size == 0:
        raise ValueError("ce_loss needs at least one example")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    clipped = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n_clamped = int(np.count_nonzero(clipped != p))
    if n_clamped:
        logger.warning("ce_loss clamped %d probabilities", n_clamped)
    loss = float(np.mean(-y * np.log(clipped) - (1.0 - y) * np.log1p(-clipped)))
    return (loss, n_clamped) if return_clamp_count else loss


def ce_loss_from_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean BCE computed on raw scores; returns the loss and d loss / d logits."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if z.size != y.size:
        raise ValueError(f"length mismatch: {z.size} logits vs {y.size} labels")
    loss = float(np.mean(softplus(z) - y * z))
    grad = (sigmoid(z) - y) / z.size
    return loss, grad


def total_loss(ce: float, margin: float, beta: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return beta * ce + (1.0 - beta) * margin
