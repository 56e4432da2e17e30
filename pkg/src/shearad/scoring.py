"""Sample-level anomaly scores and heatmap-based defect localization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from shearad.datamodel import BoundingBox, Detection
from shearad.errors import ValidationError

STRATEGIES = ("peaks", "means", "recon")
COMPATIBLE = {"AE": ("recon",), "ConvAE": ("recon",), "STFPM": ("peaks", "means")}
# Binarization thresholds tuned on validation data for the two training subsets.
DEFAULT_THRESHOLDS = {"A": 0.1, "B": 0.001}
DEFAULT_SIGMA = 4.0
DEFAULT_MIN_AREA = 4

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class AnomalyHeatmap:
    values: np.ndarray
    source_model: str = ""

    def __post_init__(self) -> None:
        self.values = _check_heatmap(self.values)

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape


def _check_heatmap(h) -> np.ndarray:
    if isinstance(h, AnomalyHeatmap):
        return h.values
    h = np.asarray(h, dtype=np.float64)
    if h.size == 0:
        raise ValidationError("empty heatmap")
    if not np.all(np.isfinite(h)) or np.any(h < 0):
        raise ValidationError("heatmap values must be finite and non-negative")
    return h


def score_peaks(h) -> float:
    return float(_check_heatmap(h).max())


def score_means(h) -> float:
    return float(_check_heatmap(h).mean())


def smooth(h, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian blur with reflective borders."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    return ndimage.gaussian_filter(_check_heatmap(h), sigma=sigma, mode="reflect")


def binarize(h, threshold: float) -> np.ndarray:
    if not np.isfinite(threshold):
        raise ValidationError("threshold must be finite")
    return np.asarray(h) >= threshold


def extract_regions(mask: np.ndarray, h, min_area: int = DEFAULT_MIN_AREA) -> list[Detection]:
    """8-connected components of ``mask`` as detections, highest confidence first.

    Confidence is the largest heatmap value inside the component.
    """
    h = _check_heatmap(h)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != h.shape:
        raise ValidationError(f"mask {mask.shape} and heatmap {h.shape} differ")
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return []
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(h), labels, index)
    maxima = ndimage.maximum(h, labels, index)
    out = []
    for lab, sl, area, peak in zip(index, ndimage.find_objects(labels), areas, maxima):
        if area < min_area:
            continue
        ys, xs = sl
        out.append((float(peak), int(lab), BoundingBox(xs.start, ys.start, xs.stop, ys.stop)))
    out.sort(key=lambda t: (-t[0], t[1]))
    return [Detection(box, conf) for conf, _, box in out]


def localize(h, threshold: float, sigma: float = DEFAULT_SIGMA, min_area: int = DEFAULT_MIN_AREA) -> list[Detection]:
    """Smooth, binarize and extract regions from one heatmap."""
    s = smooth(h, sigma)
    return extract_regions(binarize(s, threshold), s, min_area)


def check_strategy(kind: str, strategy: str) -> None:
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}")
    if strategy not in COMPATIBLE.get(kind, ()):
        raise ValidationError(f"strategy {strategy!r} is not available for {kind} models")


def score_images(model, images, strategies: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Scores for every requested strategy from a single inference pass.

    Returns ``{strategy: scores}`` and, for STFPM, the heatmaps under the
    ``"heatmaps"`` key so callers can localize without re-running the model.
    """
    from shearad.models.training import anomaly_maps, reconstruction_errors

    strategies = tuple(strategies or COMPATIBLE[model.kind])
    for s in strategies:
        check_strategy(model.kind, s)
    if model.kind == "STFPM":
        maps = anomaly_maps(model, images)
        out: dict[str, np.ndarray] = {"heatmaps": maps}
        if "peaks" in strategies:
            out["peaks"] = maps.reshape(len(maps), -1).max(axis=1).astype(np.float64)
        if "means" in strategies:
            out["means"] = maps.reshape(len(maps), -1).mean(axis=1, dtype=np.float64)
        return out
    return {"recon": reconstruction_errors(model, images)}


def sample_score(model, img: np.ndarray, strategy: str) -> float:
    check_strategy(model.kind, strategy)
    return float(score_images(model, np.asarray(img)[None], (strategy,))[strategy][0])


def threshold_candidates(heatmaps: Iterable[np.ndarray], n: int) -> np.ndarray:
    """``n`` log-spaced thresholds spanning three decades below the largest heatmap value."""
    top = max((float(np.max(h)) for h in heatmaps), default=0.0)
    if top <= 0 or n < 1:
        return np.zeros(1)
    return np.geomspace(top * 1e-3, top, n)


def search_threshold(
    heatmaps: Iterable[np.ndarray],
    ground_truth: Sequence[Sequence[BoundingBox]],
    candidates: Sequence[float],
    sigma: float = DEFAULT_SIGMA,
    min_area: int = DEFAULT_MIN_AREA,
    metric: str = "map50",
) -> tuple[float, dict[float, float]]:
    """Pick the binarization threshold maximizing a localization metric on validation data."""
    from shearad.eval.detection import map_suite

    smoothed = [smooth(h, sigma) for h in heatmaps]
    gts = {str(i): list(g) for i, g in enumerate(ground_truth)}
    results: dict[float, float] = {}
    for t in candidates:
        preds = {str(i): extract_regions(binarize(s, t), s, min_area) for i, s in enumerate(smoothed)}
        results[float(t)] = map_suite(preds, gts)[metric]
    best = max(results, key=lambda t: (results[t], -t))
    return best, results
