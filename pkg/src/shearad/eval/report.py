"""Metrics reports, curve CSVs and static plots."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from shearad.errors import ValidationError

LOCALIZATION_KEYS = ("mean_iou", "map", "map50", "map75", "mar1", "mar10")

# Published comparison figures, carried as constants and never recomputed.
YOLOV8_REFERENCE = {
    "mean_iou": 0.8695,
    "map": 0.7435,
    "map50": 0.9901,
    "map75": 0.9195,
    "mar1": 0.5817,
    "mar10": 0.7884,
}
REPORTED_CHANCE_AP = {"A": 0.61, "B": 0.36}


@dataclass
class MetricsReport:
    roc_points: list[tuple[float, float]]
    auc: float
    pr_points: list[tuple[float, float]]
    ap: float
    chance_ap: float
    localization: dict | None = None
    config_hash: str = ""
    subset: str = ""
    model: str = ""
    strategy: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.roc_points = [(float(a), float(b)) for a, b in self.roc_points]
        self.pr_points = [(float(a), float(b)) for a, b in self.pr_points]
        fpr = [p[0] for p in self.roc_points]
        if any(b < a for a, b in zip(fpr, fpr[1:])):
            raise ValidationError("ROC points must be ordered by non-decreasing FPR")
        rec = [p[0] for p in self.pr_points]
        if any(b < a for a, b in zip(rec, rec[1:])):
            raise ValidationError("PR points must be ordered by non-decreasing recall")
        scalars = {"auc": self.auc, "ap": self.ap, "chance_ap": self.chance_ap}
        if self.localization is not None:
            missing = [k for k in LOCALIZATION_KEYS if k not in self.localization]
            if missing:
                raise ValidationError(f"localization section lacks {missing}")
            self.localization = {k: float(self.localization[k]) for k in LOCALIZATION_KEYS}
            scalars.update(self.localization)
        for name, v in scalars.items():
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValidationError(f"{name} = {v} is outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(**obj)


def write_report(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")
    return path


def read_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_json(json.loads(Path(path).read_text()))


def write_curve_csv(points: Sequence[tuple[float, float]], header: tuple[str, str], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows((repr(a), repr(b)) for a, b in points)
    return path


def write_embedding_csv(ids: Sequence[str], coords: np.ndarray, labels: Sequence[bool], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("id", "x", "y", "label"))
        for sid, (x, y), lab in zip(ids, coords, labels):
            w.writerow((sid, repr(float(x)), repr(float(y)), int(bool(lab))))
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed metadata keeps PNG bytes reproducible across runs.
    fig.savefig(path, dpi=80, metadata={"Software": None})
    _pyplot().close(fig)
    return path


def plot_roc(report: MetricsReport, path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(*zip(*report.roc_points), drawstyle="default", label=f"AUC {report.auc:.3f}")
    ax.plot([0, 1], [0, 1], ls=":", color="grey")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", xlim=(0, 1), ylim=(0, 1.02))
    ax.legend(loc="lower right")
    return _save(fig, path)


def plot_pr(report: MetricsReport, path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(*zip(*report.pr_points), drawstyle="steps-post", label=f"AP {report.ap:.3f}")
    ax.axhline(report.chance_ap, ls=":", color="grey", label=f"chance {report.chance_ap:.2f}")
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02))
    ax.legend(loc="lower left")
    return _save(fig, path)


def plot_heatmap_overlays(images, heatmaps, detections, truths, titles, path: str | Path, cols: int = 4) -> Path:
    """Grid of phase images with the heatmap blended on top, GT boxes white, detections red."""
    plt = _pyplot()
    n = len(images)
    rows = max(1, math.ceil(n / cols))
    fig, axs = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.0 * rows), squeeze=False)
    for ax in axs.ravel():
        ax.axis("off")
    for ax, img, h, dets, gts, title in zip(axs.ravel(), images, heatmaps, detections, truths, titles):
        ax.imshow(img, cmap="gray", vmin=-math.pi, vmax=math.pi)
        ax.imshow(h, cmap="jet", alpha=0.45)
        for box, color in [(b, "white") for b in gts] + [(d.box, "red") for d in dets]:
            ax.add_patch(
                plt.Rectangle(
                    (box.x_min - 0.5, box.y_min - 0.5),
                    box.x_max - box.x_min,
                    box.y_max - box.y_min,
                    fill=False,
                    color=color,
                    lw=1,
                )
            )
        ax.set_title(title, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_embedding(coords: np.ndarray, labels, path: str | Path, title: str = "") -> Path:
    plt = _pyplot()
    labels = np.asarray(labels, dtype=bool)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(*coords[~labels].T, s=8, c="tab:blue", label="defect-free")
    ax.scatter(*coords[labels].T, s=8, c="tab:red", label="defective")
    ax.legend(loc="best", fontsize=7)
    ax.set_title(title, fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, path)
