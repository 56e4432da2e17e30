"""Binary classification metrics over sample-level anomaly scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from shearad.errors import ValidationError


@dataclass(frozen=True)
class ScoredSample:
    id: str
    label: bool
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise ValidationError(f"sample {self.id!r} has non-finite score {self.score}")


def _arrays(samples: Sequence[ScoredSample]) -> tuple[np.ndarray, np.ndarray]:
    labels = np.array([bool(s.label) for s in samples], dtype=bool)
    scores = np.array([float(s.score) for s in samples], dtype=np.float64)
    return labels, scores


def _grouped_counts(labels: np.ndarray, scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (TP, FP) counts after each distinct score, highest score first."""
    uniq, inverse = np.unique(-scores, return_inverse=True)
    pos = np.bincount(inverse, weights=labels, minlength=len(uniq))
    neg = np.bincount(inverse, weights=~labels, minlength=len(uniq))
    return np.cumsum(pos), np.cumsum(neg)


def roc_auc(samples: Sequence[ScoredSample]) -> tuple[list[tuple[float, float]], float]:
    """ROC points (FPR, TPR) and trapezoidal AUC; tied scores form one step."""
    labels, scores = _arrays(samples)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs both defective and defect-free samples")
    tps, fps = _grouped_counts(labels, scores)
    # Integer trapezoids keep the area exact before the final division.
    tps = np.concatenate([[0.0], tps])
    fps = np.concatenate([[0.0], fps])
    area = math.fsum((fps[1:] - fps[:-1]) * (tps[1:] + tps[:-1]))
    auc = area / (2.0 * n_pos * n_neg)
    points = [(float(f / n_neg), float(t / n_pos)) for f, t in zip(fps, tps)]
    return points, auc


def pr_ap(samples: Sequence[ScoredSample]) -> tuple[list[tuple[float, float]], float]:
    """Precision-recall points and step-integrated AP, ``sum (R_i - R_{i-1}) P_i``.

    Equal scores are one threshold, so a tied block contributes its recall
    gain at the block's pooled precision.
    """
    labels, scores = _arrays(samples)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("average precision needs at least one defective sample")
    tps, fps = _grouped_counts(labels, scores)
    precision = tps / (tps + fps)
    gains = np.diff(np.concatenate([[0.0], tps])).astype(np.int64)
    # One term per positive keeps fsum's single rounding, independent of tie grouping.
    ap = math.fsum(np.repeat(precision, gains)) / n_pos
    points = [(0.0, 1.0)] + [(float(t / n_pos), float(p)) for t, p in zip(tps, precision)]
    return points, ap


def chance_ap(samples: Sequence[ScoredSample]) -> float:
    """AP of a random ranking: the defective prevalence."""
    if not samples:
        raise ValidationError("no samples")
    labels, _ = _arrays(samples)
    return float(labels.mean())


def scored_samples(ids: Sequence[str], labels: Sequence[bool], scores: Sequence[float]) -> list[ScoredSample]:
    if not len(ids) == len(labels) == len(scores):
        raise ValidationError("ids, labels and scores differ in length")
    return [ScoredSample(str(i), bool(l), float(s)) for i, l, s in zip(ids, labels, scores)]
