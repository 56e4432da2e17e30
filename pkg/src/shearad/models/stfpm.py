"""Student-teacher feature pyramid matching.

A frozen teacher and a trainable student share one backbone topology. The
per-position discrepancy between their channel-normalized features is both
the training loss and, after upsampling, the anomaly heatmap.
"""

from __future__ import annotations

import copy
import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from shearad.errors import ValidationError
from shearad.models.preprocess import IMAGENET_NORMALIZATION

NORM_EPS = 1e-8


@dataclass(frozen=True)
class STFPMConfig:
    backbone: str = "resnet18"
    pyramid_layers: tuple[int, ...] = (1, 2, 3)
    teacher_checkpoint: str | None = None
    input_resolution: tuple[int, int] = (256, 256)
    combination: str = "product"

    def __post_init__(self) -> None:
        if self.backbone != "resnet18":
            raise ValidationError(f"unsupported backbone {self.backbone!r}")
        if not self.pyramid_layers or any(l not in (1, 2, 3, 4) for l in self.pyramid_layers):
            raise ValidationError(f"pyramid layers must be residual stages 1-4, got {self.pyramid_layers}")
        if self.combination not in ("product", "sum"):
            raise ValidationError(f"combination must be 'product' or 'sum', got {self.combination!r}")
        h, w = self.input_resolution
        if h % 32 or w % 32:
            raise ValidationError(f"input resolution {self.input_resolution} must be a multiple of 32")

    def to_json(self) -> dict:
        return asdict(self)


class ResNetPyramid(nn.Module):
    """ResNet18 trunk returning the outputs of the selected residual stages."""

    def __init__(self, layers: Sequence[int] = (1, 2, 3)):
        super().__init__()
        self.layers = tuple(sorted(layers))
        net = torchvision.models.resnet18(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4][: max(self.layers)])

    @property
    def channels(self) -> list[int]:
        return [64 * 2 ** (l - 1) for l in self.layers]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        feats = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in self.layers:
                feats.append(x)
        return feats


class ToyPyramid(nn.Module):
    """Two smooth convolutional stages; small enough for finite-difference checks."""

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (4, 6)):
        super().__init__()
        self.stage1 = nn.Sequential(nn.Conv2d(in_channels, channels[0], 3, padding=1), nn.Tanh())
        self.stage2 = nn.Sequential(nn.Conv2d(channels[0], channels[1], 3, stride=2, padding=1), nn.Tanh())

    @property
    def channels(self) -> list[int]:
        return [self.stage1[0].out_channels, self.stage2[0].out_channels]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        f1 = self.stage1(x)
        return [f1, self.stage2(f1)]


def layer_distance(teacher_feat: torch.Tensor, student_feat: torch.Tensor) -> torch.Tensor:
    """``0.5 * ||t/|t| - s/|s|||^2`` over channels, one map per batch item."""
    if teacher_feat.shape != student_feat.shape:
        raise ValidationError(f"feature shape mismatch {tuple(teacher_feat.shape)} vs {tuple(student_feat.shape)}")
    t = teacher_feat / (teacher_feat.norm(dim=1, keepdim=True) + NORM_EPS)
    s = student_feat / (student_feat.norm(dim=1, keepdim=True) + NORM_EPS)
    return 0.5 * ((t - s) ** 2).sum(dim=1)


def stfpm_layer_distance(teacher_feats, student_feats) -> list[torch.Tensor]:
    if len(teacher_feats) != len(student_feats):
        raise ValidationError("teacher and student pyramids differ in depth")
    return [layer_distance(t, s) for t, s in zip(teacher_feats, student_feats)]


def stfpm_loss(distance_maps: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of each map's mean (over batch and space)."""
    if not distance_maps:
        raise ValidationError("need at least one distance map")
    return sum(d.mean() for d in distance_maps)


def upsample_aligned(d: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling of (N, h, w) maps taken at stride ``H / h``.

    Padded stride-2 convolutions center feature cell ``i`` on input pixel
    ``i * stride``, not on the middle of its stride block, so samples are
    placed accordingly and clamped at the far border.
    """
    n, h, w = d.shape
    H, W = size
    if (h, w) == (H, W):
        return d
    ys = torch.arange(H, dtype=d.dtype) * (h / H)
    xs = torch.arange(W, dtype=d.dtype) * (w / W)
    gy = (2 * ys / max(h - 1, 1) - 1) if h > 1 else torch.zeros_like(ys)
    gx = (2 * xs / max(w - 1, 1) - 1) if w > 1 else torch.zeros_like(xs)
    grid = torch.stack(torch.meshgrid(gx, gy, indexing="xy"), dim=-1).expand(n, H, W, 2)
    return F.grid_sample(d[:, None], grid, mode="bilinear", padding_mode="border", align_corners=True)[:, 0]


def combine_maps(distance_maps: Sequence[torch.Tensor], size: tuple[int, int], combination: str) -> torch.Tensor:
    """Upsample (N, h, w) maps to ``size`` and combine them into (N, H, W)."""
    out = None
    for d in distance_maps:
        up = upsample_aligned(d, size)
        if out is None:
            out = up
        elif combination == "product":
            out = out * up
        else:
            out = out + up
    return out.clamp_min(0.0)


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class STFPM(nn.Module):
    """Teacher/student pair with the teacher frozen in evaluation mode."""

    def __init__(self, teacher: nn.Module, student: nn.Module | None = None, combination: str = "product"):
        super().__init__()
        self.teacher = freeze(teacher)
        self.student = student if student is not None else copy.deepcopy(teacher)
        for p in self.student.parameters():
            p.requires_grad_(True)
        self.combination = combination

    def train(self, mode: bool = True) -> "STFPM":
        super().train(mode)
        self.teacher.eval()
        return self

    def pyramids(self, x: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        with torch.no_grad():
            teacher_feats = self.teacher(x)
        return teacher_feats, self.student(x)

    def loss(self, x: torch.Tensor) -> torch.Tensor:
        return stfpm_loss(stfpm_layer_distance(*self.pyramids(x)))

    @torch.no_grad()
    def anomaly_map(self, x: torch.Tensor) -> torch.Tensor:
        """Heatmaps of shape (N, H, W) on the grid of ``x``."""
        maps = stfpm_layer_distance(*self.pyramids(x))
        return combine_maps(maps, tuple(x.shape[-2:]), self.combination)


def random_student(layers: Sequence[int], seed: int) -> ResNetPyramid:
    torch.manual_seed(seed)
    return ResNetPyramid(layers)


class TeacherLoadError(ValidationError):
    pass


def save_teacher(backbone: ResNetPyramid, path: str | Path, normalization: dict) -> str:
    """Write a teacher checkpoint and return its sha256."""
    buf = io.BytesIO()
    torch.save(
        {
            "topology": "resnet18",
            "layers": list(backbone.layers),
            "normalization": {k: list(v) for k, v in normalization.items()},
            "state_dict": backbone.state_dict(),
        },
        buf,
    )
    data = buf.getvalue()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_teacher(path: str | Path, layers: Sequence[int] = (1, 2, 3)) -> tuple[ResNetPyramid, dict, str]:
    """Load a frozen ResNet18 trunk.

    Accepts either a checkpoint written by :func:`save_teacher` or a plain
    torchvision ResNet18 state dict (ImageNet normalization is assumed for
    the latter). Returns ``(backbone, normalization, sha256)``.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
        blob = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise TeacherLoadError(f"cannot read teacher checkpoint {path}: {exc}") from exc
    if isinstance(blob, dict) and "state_dict" in blob:
        if blob.get("topology") != "resnet18":
            raise TeacherLoadError(f"{path}: unsupported topology {blob.get('topology')!r}")
        state, normalization = blob["state_dict"], blob.get("normalization", IMAGENET_NORMALIZATION)
    elif isinstance(blob, dict):
        state, normalization = blob, IMAGENET_NORMALIZATION
    else:
        raise TeacherLoadError(f"{path}: not a state dict")

    backbone = ResNetPyramid(layers)
    state = {_torchvision_key(k): v for k, v in state.items()}
    expected = backbone.state_dict()
    missing = [k for k in expected if k not in state]
    if missing:
        raise TeacherLoadError(f"{path}: topology mismatch, missing {missing[:5]}")
    try:
        backbone.load_state_dict({k: state[k] for k in expected}, strict=True)
    except RuntimeError as exc:
        raise TeacherLoadError(f"{path}: topology mismatch ({exc})") from exc
    return freeze(backbone), dict(normalization), hashlib.sha256(data).hexdigest()


def _torchvision_key(key: str) -> str:
    # torchvision names residual stages layer1..layer4; ours live in stages.0..3
    if key.startswith("layer") and key[5].isdigit():
        return f"stages.{int(key[5]) - 1}{key[6:]}"
    return key
