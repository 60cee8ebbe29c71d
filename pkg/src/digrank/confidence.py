"""Answer generation confidence from per-token probabilities.

Two steps: a centered moving average over token probabilities (edge windows
are truncated and averaged over the tokens they actually cover), then a
weighted product where the first ``head_len`` tokens carry exponent
``head_weight * alpha`` and the remaining tokens carry ``1 - alpha``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ConfidenceParams:
    window_size: int = 3
    head_len: int = 3
    head_weight: float = 0.8
    alpha: float = 0.6

    def __post_init__(self) -> None:
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be a positive odd integer, got {self.window_size}")
        if self.head_len < 1:
            raise ValueError(f"head_len must be >= 1, got {self.head_len}")
        if not self.head_weight > 0:
            raise ValueError(f"head_weight must be > 0, got {self.head_weight}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def head_exponent(self) -> float:
        return self.head_weight * self.alpha

    @property
    def tail_exponent(self) -> float:
        return 1.0 - self.alpha


def _check_probs(probs: Sequence[float]) -> np.ndarray:
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("token probabilities must be a non-empty 1-d sequence")
    if not np.all((arr > 0) & (arr <= 1)):
        raise ValueError("token probabilities must lie in (0, 1]")
    return arr


def smooth(probs: Sequence[float], window_size: int = 3) -> list[float]:
    """Centered moving average with truncated edge windows.

    >>> smooth([0.3, 0.3, 0.3], 3)
    [0.3, 0.3, 0.3]
    """
    if window_size < 1 or window_size % 2 == 0:
        raise ValueError(f"window_size must be a positive odd integer, got {window_size}")
    values = _check_probs(probs).tolist()
    radius = window_size // 2
    out = []
    for i in range(len(values)):
        window = values[max(i - radius, 0): i + radius + 1]
        mean = math.fsum(window) / len(window)
        # rounding must not push a mean outside its window (keeps constant runs exact)
        out.append(min(max(mean, min(window)), max(window)))
    return out


def log_confidence(probs: Sequence[float], params: ConfidenceParams = ConfidenceParams()) -> float:
    """Log of the weighted confidence; summed in log space to avoid underflow."""
    smoothed = np.asarray(smooth(probs, params.window_size))
    logs = np.log(smoothed)
    k = min(params.head_len, logs.size)
    return float(params.head_exponent * logs[:k].sum() + params.tail_exponent * logs[k:].sum())


def estimate_confidence(probs: Sequence[float], params: ConfidenceParams = ConfidenceParams()) -> float:
    """Confidence in (0, 1] that the model generates the scored answer.

    ``probs`` is the teacher-forced per-token probability sequence (or any
    object with a ``probs`` attribute, e.g. ``TokenProbSequence``). Answers
    no longer than ``head_len`` only contribute head factors.
    """
    probs = getattr(probs, "probs", probs)
    return math.exp(log_confidence(probs, params))
