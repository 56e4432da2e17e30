"""Image preparation for the three detectors."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

# (width, height) consumed by both autoencoders.
AE_INPUT_SIZE = (96, 50)
IMAGENET_NORMALIZATION = {"mean": (0.485, 0.456, 0.406), "std": (0.229, 0.224, 0.225)}


def scale_phase(pixels: np.ndarray | torch.Tensor):
    """Map wrapped phase in [-pi, pi) linearly onto [0, 1)."""
    return (pixels + math.pi) / (2 * math.pi)


def _as_batch(images: Sequence[np.ndarray] | np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr))[:, None]


def resize(batch: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if batch.shape[-2:] == (height, width):
        return batch
    return F.interpolate(batch, size=(height, width), mode="bilinear", align_corners=False)


def aspect_pad(batch: torch.Tensor, height: int, width: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Zero-pad bottom/right until the aspect ratio matches ``height / width``.

    Returns the padded batch and its (H, W) so heatmaps can be cropped back.
    """
    h, w = batch.shape[-2:]
    target = height / width
    if h / w < target:
        ph, pw = max(h, round(w * target)), w
    else:
        ph, pw = h, max(w, round(h / target))
    if (ph, pw) != (h, w):
        batch = F.pad(batch, (0, pw - w, 0, ph - h), value=0.0)
    return batch, (ph, pw)


def preprocess_autoencoder(images, flatten: bool) -> torch.Tensor:
    """Resize to 96x50, scale to [0, 1]; ``flatten`` gives 4800-long vectors for the AE."""
    width, height = AE_INPUT_SIZE
    x = scale_phase(resize(_as_batch(images), height, width))
    return x.reshape(x.shape[0], -1) if flatten else x


def preprocess_stfpm(
    images,
    resolution: tuple[int, int],
    normalization: dict | None = None,
) -> torch.Tensor:
    """Aspect-pad, resize to ``resolution`` (H, W), replicate to RGB and normalize."""
    norm = normalization or IMAGENET_NORMALIZATION
    batch, _ = aspect_pad(_as_batch(images), *resolution)
    x = scale_phase(resize(batch, *resolution)).repeat(1, 3, 1, 1)
    mean = torch.tensor(norm["mean"], dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(norm["std"], dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def preprocess(images, kind: str, stfpm_resolution: tuple[int, int] = (256, 256), normalization=None) -> torch.Tensor:
    if kind == "AE":
        return preprocess_autoencoder(images, flatten=True)
    if kind == "ConvAE":
        return preprocess_autoencoder(images, flatten=False)
    if kind == "STFPM":
        return preprocess_stfpm(images, stfpm_resolution, normalization)
    raise ValueError(f"unknown model kind {kind!r}")


def heatmap_to_image_grid(heatmap: np.ndarray, image_shape: tuple[int, int], resolution: tuple[int, int]) -> np.ndarray:
    """Undo aspect padding and resizing so a heatmap lines up with the source image."""
    h, w = image_shape
    dummy = torch.zeros(1, 1, h, w)
    _, (ph, pw) = aspect_pad(dummy, *resolution)
    hm = torch.from_numpy(np.ascontiguousarray(heatmap, dtype=np.float32))[None, None]
    hm = resize(hm, ph, pw)[..., :h, :w]
    return hm[0, 0].numpy().clip(min=0.0)
