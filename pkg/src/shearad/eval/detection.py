"""Single-class object-detection metrics: IoU, greedy matching, mAP and mAR@k.

AP per IoU threshold uses 101-point interpolation of the precision envelope,
the convention of the COCO evaluation tools.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from shearad.datamodel import BoundingBox, Detection
from shearad.errors import ValidationError

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class Matching:
    """Per-prediction TP flags (in descending-confidence order) and matched GT indices."""

    order: list[int]
    tp: list[bool]
    gt_index: list[int]
    unmatched_gt: int

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fp(self) -> int:
        return len(self.tp) - self.n_tp


def _confidence_order(preds: Sequence[Detection]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_detections(preds: Sequence[Detection], gts: Sequence[BoundingBox], iou_threshold: float) -> Matching:
    """Greedy matching: each prediction, by descending confidence, takes the
    still-unmatched ground truth with the highest IoU at or above the threshold."""
    if not 0 < iou_threshold <= 1:
        raise ValidationError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    order = _confidence_order(preds)
    taken = [False] * len(gts)
    tp, gt_index = [], []
    for i in order:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(preds[i].box, g)
            if v >= iou_threshold and v > best:
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
        tp.append(best_j >= 0)
        gt_index.append(best_j)
    return Matching(order, tp, gt_index, taken.count(False))


def interpolated_ap(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall for pooled detections."""
    if n_gt == 0:
        raise ValidationError("no ground-truth boxes to evaluate against")
    if len(scores) == 0:
        return 0.0, 0.0
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(tp, dtype=np.float64)[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean()), float(recall[-1])


def _pool(
    preds: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[BoundingBox]],
    threshold: float,
    max_dets: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    scores, flags, n_gt = [], [], 0
    for sid in sorted(gts):
        p = sorted(preds[sid], key=lambda d: -d.confidence)[:max_dets]
        m = match_detections(p, gts[sid], threshold)
        scores.extend(p[i].confidence for i in m.order)
        flags.extend(m.tp)
        n_gt += len(gts[sid])
    return np.asarray(scores, dtype=np.float64), np.asarray(flags, dtype=bool), n_gt


def mean_best_iou(preds: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[BoundingBox]]) -> float:
    """Mean over ground truths of the best IoU achieved by any prediction (0 if none)."""
    best = [max((iou(d.box, g) for d in preds[sid]), default=0.0) for sid in sorted(gts) for g in gts[sid]]
    if not best:
        raise ValidationError("no ground-truth boxes to evaluate against")
    return float(np.mean(best))


def map_suite(
    preds: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[BoundingBox]],
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = MAX_DETECTIONS,
) -> dict:
    """mAP over IoU 0.50:0.05:0.95, mAP@50, mAP@75, mAR@1, mAR@10 and mean best IoU.

    With a single class, mAP at a threshold is that threshold's AP.
    """
    if set(preds) != set(gts):
        raise ValidationError("predictions and ground truth cover different sample ids")
    thresholds = [float(t) for t in iou_thresholds]
    ap_per_t, recall = [], {1: [], 10: []}
    for t in thresholds:
        scores, flags, n_gt = _pool(preds, gts, t, max_dets)
        ap_per_t.append(interpolated_ap(scores, flags, n_gt)[0])
        for k in recall:
            s, f, n = _pool(preds, gts, t, k)
            recall[k].append(f.sum() / n)

    def at(t: float) -> float:
        hits = [ap for thr, ap in zip(thresholds, ap_per_t) if abs(thr - t) < 1e-9]
        return hits[0] if hits else float("nan")

    return {
        "map": float(np.mean(ap_per_t)),
        "map50": at(0.5),
        "map75": at(0.75),
        "mar1": float(np.mean(recall[1])),
        "mar10": float(np.mean(recall[10])),
        "mean_iou": mean_best_iou(preds, gts),
        "ap_per_threshold": dict(zip(thresholds, ap_per_t)),
    }


def overlap_rate(
    preds: Mapping[str, Sequence[Detection]], gts: Mapping[str, Sequence[BoundingBox]], min_iou: float = 0.25
) -> float:
    """Fraction of ground-truth boxes overlapped by some prediction at IoU >= ``min_iou``."""
    hits = [any(iou(d.box, g) >= min_iou for d in preds[sid]) for sid in gts for g in gts[sid]]
    return float(np.mean(hits)) if hits else float("nan")
