"""Training loops, checkpoints and batched inference for all detector kinds."""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from shearad import phz
from shearad.datamodel import DatasetManifest, SampleRecord
from shearad.errors import ValidationError
from shearad.models.autoencoders import AEConfig, ConvAE, ConvAEConfig, FullyConnectedAE, per_sample_errors
from shearad.models.preprocess import heatmap_to_image_grid, preprocess
from shearad.models.stfpm import STFPM, ResNetPyramid, STFPMConfig, load_teacher, parameter_hash, random_student

log = logging.getLogger(__name__)

KINDS = ("AE", "ConvAE", "STFPM")


class CheckpointError(ValidationError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError(f"invalid hyperparameters {self}")


def default_hyperparams(kind: str) -> Hyperparams:
    if kind == "STFPM":
        return Hyperparams(epochs=100, batch_size=32, learning_rate=0.4, momentum=0.9, weight_decay=1e-4)
    return Hyperparams()


def default_model_config(kind: str):
    return {"AE": AEConfig, "ConvAE": ConvAEConfig, "STFPM": STFPMConfig}[kind]()


def model_config_from_json(kind: str, obj: dict):
    obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
    try:
        return {"AE": AEConfig, "ConvAE": ConvAEConfig, "STFPM": STFPMConfig}[kind](**obj)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad {kind} config {obj}: {exc}") from exc


@dataclass
class TrainedModel:
    kind: str
    config: AEConfig | ConvAEConfig | STFPMConfig
    module: nn.Module
    metadata: dict = field(default_factory=dict)

    @property
    def normalization(self) -> dict | None:
        return self.metadata.get("normalization")

    def inputs(self, images) -> torch.Tensor:
        res = self.config.input_resolution if self.kind == "STFPM" else (256, 256)
        return preprocess(images, self.kind, res, self.normalization)


def load_images(manifest: DatasetManifest, records: Sequence[SampleRecord]) -> np.ndarray:
    return np.stack([phz.read_tensor(manifest.resolve(r)) for r in records])


def _batches(n: int, batch_size: int, order: torch.Tensor | None = None):
    idx = order if order is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def _build_module(kind: str, config, seed: int, teacher: ResNetPyramid | None = None) -> nn.Module:
    torch.manual_seed(seed)
    if kind == "AE":
        return FullyConnectedAE(config)
    if kind == "ConvAE":
        return ConvAE(config)
    return STFPM(teacher, random_student(config.pyramid_layers, seed), config.combination)


def _loss(kind: str, module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    if kind == "STFPM":
        return module.loss(x)
    return nn.functional.mse_loss(module(x), x)


def _mean_loss(kind: str, module: nn.Module, x: torch.Tensor, batch_size: int) -> float:
    module.eval()
    total = 0.0
    with torch.no_grad():
        for idx in _batches(len(x), batch_size):
            total += float(_loss(kind, module, x[idx])) * len(idx)
    return total / len(x)


def train(
    kind: str,
    manifest: DatasetManifest,
    hyperparams: Hyperparams | None = None,
    seed: int = 0,
    config=None,
    teacher: tuple[ResNetPyramid, dict, str] | None = None,
) -> TrainedModel:
    """Fit one detector on the manifest's ``train`` split (defect-free only).

    STFPM needs a teacher, either passed as ``(backbone, normalization,
    sha256)`` or loaded from ``config.teacher_checkpoint``.
    """
    if kind not in KINDS:
        raise ValidationError(f"unknown model kind {kind!r}")
    hp = hyperparams or default_hyperparams(kind)
    config = config or default_model_config(kind)
    train_recs = manifest.split("train")
    if not train_recs:
        raise ValidationError("training split is empty")
    bad = [r.id for r in train_recs if r.defective]
    if bad:
        raise ValidationError(f"defective samples in training split: {bad}")
    val_recs = [r for r in manifest.split("val") if not r.defective] or train_recs

    metadata: dict = {"seed": seed, "hyperparams": asdict(hp)}
    if kind == "STFPM":
        if teacher is None:
            if not config.teacher_checkpoint:
                raise ValidationError("STFPM training needs a teacher checkpoint")
            teacher = load_teacher(config.teacher_checkpoint, config.pyramid_layers)
        backbone, normalization, teacher_hash = teacher
        metadata.update(normalization={k: list(v) for k, v in normalization.items()}, teacher_hash=teacher_hash)
    module = _build_module(kind, config, seed, teacher[0] if teacher else None)
    model = TrainedModel(kind, config, module, metadata)

    x_train = model.inputs(load_images(manifest, train_recs))
    x_val = model.inputs(load_images(manifest, val_recs))
    if kind == "STFPM":
        params = [p for p in module.student.parameters()]
        opt = torch.optim.SGD(params, lr=hp.learning_rate, momentum=hp.momentum, weight_decay=hp.weight_decay)
        teacher_before = parameter_hash(module.teacher)
    else:
        opt = torch.optim.Adam(module.parameters(), lr=hp.learning_rate, weight_decay=hp.weight_decay)

    gen = torch.Generator().manual_seed(seed)
    train_losses, val_losses = [], []
    for epoch in range(hp.epochs):
        module.train()
        total = 0.0
        for idx in _batches(len(x_train), hp.batch_size, torch.randperm(len(x_train), generator=gen)):
            loss = _loss(kind, module, x_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_losses.append(total / len(x_train))
        val_losses.append(_mean_loss(kind, module, x_val, hp.batch_size))
        log.info("%s epoch %d/%d train %.5f val %.5f", kind, epoch + 1, hp.epochs, train_losses[-1], val_losses[-1])

    if kind == "STFPM" and parameter_hash(module.teacher) != teacher_before:
        raise RuntimeError("teacher parameters changed during training")
    module.eval()
    metadata.update(
        epochs=hp.epochs,
        train_losses=train_losses,
        val_losses=val_losses,
        final_train_loss=train_losses[-1],
        final_val_loss=val_losses[-1],
    )
    return model


def save_model(model: TrainedModel, path: str | Path) -> str:
    """Write ``<path>`` (parameters) and ``<path>.json`` (sidecar); returns the blob sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({"kind": model.kind, "state_dict": model.module.state_dict()}, buf)
    data = buf.getvalue()
    path.write_bytes(data)
    digest = hashlib.sha256(data).hexdigest()
    sidecar = {"kind": model.kind, "config": model.config.to_json(), "sha256": digest, **model.metadata}
    Path(f"{path}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return digest


def load_model(path: str | Path) -> TrainedModel:
    path = Path(path)
    try:
        sidecar = json.loads(Path(f"{path}.json").read_text())
        data = path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != sidecar.get("sha256"):
        raise CheckpointError(f"checkpoint {path} does not match its recorded hash")
    kind = sidecar["kind"]
    config = model_config_from_json(kind, sidecar["config"])
    if kind == "STFPM":
        module = STFPM(ResNetPyramid(config.pyramid_layers), ResNetPyramid(config.pyramid_layers), config.combination)
    else:
        module = _build_module(kind, config, 0)
    try:
        blob = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
        module.load_state_dict(blob["state_dict"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from exc
    module.eval()
    metadata = {k: v for k, v in sidecar.items() if k not in ("kind", "config", "sha256")}
    return TrainedModel(kind, config, module, metadata)


@torch.no_grad()
def reconstruction_errors(model: TrainedModel, images, batch_size: int = 64) -> np.ndarray:
    if model.kind not in ("AE", "ConvAE"):
        raise ValidationError(f"{model.kind} does not reconstruct its input")
    model.module.eval()
    x = model.inputs(images)
    out = [per_sample_errors(x[idx], model.module(x[idx])) for idx in _batches(len(x), batch_size)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def anomaly_maps(model: TrainedModel, images, batch_size: int = 32, image_grid: bool = False) -> np.ndarray:
    """STFPM heatmaps, on the model input grid or (``image_grid``) the source image grid."""
    if model.kind != "STFPM":
        raise ValidationError(f"{model.kind} does not produce heatmaps")
    model.module.eval()
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    x = model.inputs(images)
    maps = torch.cat([model.module.anomaly_map(x[idx]) for idx in _batches(len(x), batch_size)]).numpy()
    if not image_grid:
        return maps
    res = model.config.input_resolution
    return np.stack([heatmap_to_image_grid(m, images.shape[-2:], res) for m in maps])


@torch.no_grad()
def latent_features(model: TrainedModel, images, batch_size: int = 64, network: str = "student") -> np.ndarray:
    """AE/ConvAE bottleneck codes, or mean-pooled deepest STFPM features."""
    model.module.eval()
    x = model.inputs(images)
    feats = []
    for idx in _batches(len(x), batch_size):
        if model.kind == "STFPM":
            net = model.module.student if network == "student" else model.module.teacher
            feats.append(net(x[idx])[-1].mean(dim=(2, 3)))
        else:
            feats.append(model.module.encode(x[idx]).reshape(len(idx), -1))
    return torch.cat(feats).double().numpy()
