"""Dataset manifests, subset construction and prediction files.

A manifest is a JSON document listing every sample of a generated dataset.
Sample paths are stored relative to the manifest's directory so that a
dataset folder can be moved as a whole.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from shearad.errors import ManifestError, ValidationError

MANIFEST_VERSION = "1"
CONDITIONS = ("fixed", "deformed")
SPLITS = ("train", "val", "test", "unassigned")

# Defective samples held out for validation vs. testing (391 val : 714 test).
DEFECTIVE_VAL_SHARE = 391 / (391 + 714)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates.

    Boxes follow the pixel-edge convention: a region covering pixel columns
    ``c0..c1`` (inclusive) has ``x_min = c0`` and ``x_max = c1 + 1``.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {coords}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> list[float]:
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BoundingBox":
        """Tight box around the True pixels of ``mask``."""
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise ValidationError("cannot box an empty mask")
        return cls(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float


@dataclass
class SampleRecord:
    id: str
    path: str
    condition: str
    defective: bool
    boxes: list[BoundingBox] = field(default_factory=list)
    split: str = "unassigned"

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise ManifestError(f"sample {self.id}: unknown condition {self.condition!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"sample {self.id}: unknown split {self.split!r}")
        if bool(self.boxes) != bool(self.defective):
            raise ManifestError(f"sample {self.id}: defective flag and boxes disagree")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "condition": self.condition,
            "defective": self.defective,
            "boxes": [b.as_list() for b in self.boxes],
            "split": self.split,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleRecord":
        try:
            return cls(
                id=str(obj["id"]),
                path=str(obj["path"]),
                condition=obj["condition"],
                defective=bool(obj["defective"]),
                boxes=[BoundingBox(*map(float, b)) for b in obj.get("boxes", [])],
                split=obj.get("split", "unassigned"),
            )
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed sample record {obj!r}: {exc}") from exc


@dataclass
class DatasetManifest:
    version: str
    samples: list[SampleRecord]
    generator_config_hash: str
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.samples:
            raise ManifestError("manifest contains no samples")
        seen: set[str] = set()
        for rec in self.samples:
            if rec.id in seen:
                raise ManifestError(f"duplicate sample id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[str, SampleRecord]:
        return {rec.id: rec for rec in self.samples}

    def split(self, name: str) -> list[SampleRecord]:
        return [rec for rec in self.samples if rec.split == name]

    def resolve(self, rec: SampleRecord) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / rec.path

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "generator_config_hash": self.generator_config_hash,
            "samples": [rec.to_json() for rec in self.samples],
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest.to_json()
    if manifest.root is not None and manifest.root.resolve() != path.parent.resolve():
        for obj, rec in zip(doc["samples"], manifest.samples):
            obj["path"] = Path(os.path.relpath(manifest.resolve(rec), path.parent)).as_posix()
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or "samples" not in doc:
        raise ManifestError(f"{path}: missing 'samples'")
    manifest = DatasetManifest(
        version=str(doc.get("version", MANIFEST_VERSION)),
        samples=[SampleRecord.from_json(obj) for obj in doc["samples"]],
        generator_config_hash=str(doc.get("generator_config_hash", "")),
        root=path.parent,
    )
    if check_files:
        missing = [rec.path for rec in manifest.samples if not manifest.resolve(rec).is_file()]
        if missing:
            raise ManifestError(f"{path}: {len(missing)} referenced files missing: {missing}")
    return manifest


@dataclass(frozen=True)
class SubsetDefinition:
    name: str
    train_conditions: frozenset[str]


SUBSET_A = SubsetDefinition("A", frozenset({"fixed"}))
SUBSET_B = SubsetDefinition("B", frozenset({"fixed", "deformed"}))


def subset_definition(name: str) -> SubsetDefinition:
    try:
        return {"A": SUBSET_A, "B": SUBSET_B}[name]
    except KeyError:
        raise ValidationError(f"unknown subset {name!r}; expected 'A' or 'B'") from None


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Split ``n`` items into train/val/test counts; test takes the remainder."""
    n_train = _round_half_up(ratios[0] * n)
    n_val = _round_half_up(ratios[1] * n)
    return n_train, n_val, n - n_train - n_val


def build_subset(
    manifest: DatasetManifest,
    definition: SubsetDefinition,
    ratios: Sequence[float],
    seed: int,
) -> DatasetManifest:
    """Assign train/val/test splits for one subset definition.

    Admitted defect-free samples are partitioned by ``ratios``. Defective
    samples only ever land in val or test. Everything else is left
    ``unassigned``. Records are sorted by id before the seeded shuffle, so
    the result does not depend on manifest order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")

    rng = np.random.default_rng(seed)
    normal = sorted(
        (r.id for r in manifest.samples if not r.defective and r.condition in definition.train_conditions)
    )
    defective = sorted(r.id for r in manifest.samples if r.defective)

    counts = partition_counts(len(normal), ratios)
    if min(counts) < 1:
        raise ValidationError(
            f"subset {definition.name}: {len(normal)} admitted defect-free samples "
            f"cannot fill splits {counts} for ratios {ratios}"
        )
    assignment: dict[str, str] = {}
    order = [normal[i] for i in rng.permutation(len(normal))]
    bounds = np.cumsum(counts)
    for i, sid in enumerate(order):
        assignment[sid] = "train" if i < bounds[0] else "val" if i < bounds[1] else "test"

    n_def_val = _round_half_up(DEFECTIVE_VAL_SHARE * len(defective))
    for i, j in enumerate(rng.permutation(len(defective))):
        assignment[defective[j]] = "val" if i < n_def_val else "test"

    samples = [replace(rec, split=assignment.get(rec.id, "unassigned")) for rec in manifest.samples]
    return DatasetManifest(manifest.version, samples, manifest.generator_config_hash, root=manifest.root)


def ingest_external_predictions(
    path: str | Path, manifest: DatasetManifest, unit_confidence: bool = True
) -> dict[str, list[Detection]]:
    """Read detector output of the form ``[{"id", "boxes": [[x0, y0, x1, y1, conf], ...]}]``.

    External detectors must report confidences in [0, 1]. Heatmap-derived
    detections written by this package carry raw anomaly scores; pass
    ``unit_confidence=False`` to read those back.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, list):
        raise ValidationError(f"{path}: expected a JSON list")
    known = manifest.by_id()
    out: dict[str, list[Detection]] = {rec.id: [] for rec in manifest.samples}
    for entry in doc:
        sid = str(entry.get("id"))
        if sid not in known:
            raise ValidationError(f"{path}: unknown sample id {sid!r}")
        for raw in entry.get("boxes", []):
            if len(raw) != 5:
                raise ValidationError(f"{path}: sample {sid}: box needs 5 values, got {raw}")
            conf = float(raw[4])
            if not math.isfinite(conf) or conf < 0 or (unit_confidence and conf > 1.0):
                raise ValidationError(f"{path}: sample {sid}: confidence {conf} outside [0, 1]")
            out[sid].append(Detection(BoundingBox(*map(float, raw[:4])), conf))
    return out


def save_predictions(predictions: dict[str, Iterable[Detection]], path: str | Path) -> None:
    doc = [
        {"id": sid, "boxes": [d.box.as_list() + [float(d.confidence)] for d in dets]}
        for sid, dets in sorted(predictions.items())
    ]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
