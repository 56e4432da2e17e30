"""Pretext training for a teacher backbone when no pretrained weights exist.

The backbone learns to classify generator parameters of defect-free frames
(which deformation mode dominates, its sign, and the fringe density). No
defect is ever shown to the teacher.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from shearad.models.preprocess import preprocess_stfpm
from shearad.models.stfpm import ResNetPyramid, save_teacher
from shearad.synthgen import (
    N_MODES,
    GeneratorConfig,
    GlobalDeformationSpec,
    render,
    sample_seed,
)

log = logging.getLogger(__name__)

PRETEXT_NORMALIZATION = {"mean": (0.5, 0.5, 0.5), "std": (0.25, 0.25, 0.25)}
# quadratic modes whose sheared phase varies across the frame: x^2 and x*y
_MODE_INDEX = (3, 4)


@dataclass(frozen=True)
class PretextConfig:
    n_images: int = 600
    epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 1e-3
    resolution: tuple[int, int] = (64, 128)
    layers: tuple[int, ...] = (1, 2, 3)


def n_classes() -> int:
    return 1 + 2 * len(_MODE_INDEX) * 2


def pretext_sample(config: GeneratorConfig, index: int, seed: int) -> tuple[np.ndarray, int]:
    """One labelled defect-free frame. Class 0 is flat; others encode mode, sign, density."""
    seq = sample_seed(seed, f"pretext-{index:06d}")
    rng = np.random.default_rng(seq)
    label = int(rng.integers(n_classes()))
    coeffs = np.zeros(N_MODES)
    if label > 0:
        k = label - 1
        mode, sign, dense = k // 4, (k // 2) % 2, k % 2
        bound = config.global_coeff_max[_MODE_INDEX[mode]]
        mag = rng.uniform(0.55, 1.0) if dense else rng.uniform(0.1, 0.45)
        coeffs[_MODE_INDEX[mode]] = (1 if sign else -1) * mag * bound
        # mild linear tilt so classes are not trivially separable by offset
        coeffs[1:3] = rng.uniform(-1, 1, 2) * np.asarray(config.global_coeff_max[1:3])
    glob = GlobalDeformationSpec(tuple(float(c) for c in coeffs), enabled=label > 0)
    noise_seed = int(seq.generate_state(1)[0])
    pixels = render(config.specimen, config.shear, [], glob, config.noise, noise_seed, config.filter_window)
    return pixels, label


def train_pretext_teacher(
    generator: GeneratorConfig,
    path,
    seed: int = 0,
    config: PretextConfig = PretextConfig(),
) -> tuple[ResNetPyramid, dict, str]:
    """Train and save a ResNet18 trunk; returns ``(backbone, normalization, sha256)``."""
    torch.manual_seed(seed)
    images, labels = zip(*(pretext_sample(generator, i, seed) for i in range(config.n_images)))
    x = preprocess_stfpm(np.stack(images), config.resolution, PRETEXT_NORMALIZATION)
    y = torch.tensor(labels)

    backbone = ResNetPyramid(config.layers)
    head = nn.Linear(backbone.channels[-1], n_classes())
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    backbone.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(x), generator=gen)
        total, correct = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = head(backbone(x[idx])[-1].mean(dim=(2, 3)))
            loss = nn.functional.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        log.info("pretext epoch %d loss %.4f acc %.3f", epoch + 1, total / len(x), correct / len(x))
    backbone.eval()
    digest = save_teacher(backbone, path, PRETEXT_NORMALIZATION)
    return backbone, dict(PRETEXT_NORMALIZATION), digest
