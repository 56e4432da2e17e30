"""Fully connected and convolutional autoencoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from shearad.errors import ValidationError


@dataclass(frozen=True)
class AEConfig:
    input_size: tuple[int, int] = (96, 50)
    encoder_dims: tuple[int, ...] = (256, 128, 64, 10)
    dropout_rate: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def input_length(self) -> int:
        return self.input_size[0] * self.input_size[1]

    @property
    def latent_dim(self) -> int:
        return self.encoder_dims[-1]

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ConvAEConfig:
    input_size: tuple[int, int] = (96, 50)
    conv_channels: tuple[int, ...] = (96, 128, 256, 256)
    kernel: int = 3
    negative_slope: float = 0.01

    def __post_init__(self) -> None:
        if self.kernel != 3:
            raise ValidationError("ConvAE kernel is fixed at 3x3")

    def to_json(self) -> dict:
        return asdict(self)


def _dense_block(n_in: int, n_out: int, dropout: float) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, n_out), nn.Dropout(dropout), nn.ReLU())


class FullyConnectedAE(nn.Module):
    """Flattened-image autoencoder: 4800 -> 256 -> 128 -> 64 -> 10 and back."""

    def __init__(self, config: AEConfig = AEConfig()):
        super().__init__()
        self.config = config
        dims = (config.input_length, *config.encoder_dims)
        self.encoder = nn.Sequential(*(_dense_block(a, b, config.dropout_rate) for a, b in zip(dims[:-1], dims[1:])))
        rev = dims[::-1]
        blocks = [_dense_block(a, b, config.dropout_rate) for a, b in zip(rev[:-2], rev[1:-1])]
        self.decoder = nn.Sequential(*blocks, nn.Linear(rev[-2], rev[-1]), nn.Sigmoid())

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.input_length:
            raise ValidationError(f"AE expects (N, {self.config.input_length}) input, got {tuple(x.shape)}")
        return self.encoder(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encode(x))


class ConvAE(nn.Module):
    """Strided 3x3 convolutional autoencoder with a mirrored transposed decoder.

    Every encoder layer halves the spatial size and is followed by batch
    normalization and LeakyReLU. The decoder requests the exact encoder
    shapes from each transposed convolution so odd sizes round-trip.
    """

    def __init__(self, config: ConvAEConfig = ConvAEConfig()):
        super().__init__()
        self.config = config
        chans = (1, *config.conv_channels)
        slope = config.negative_slope
        self.encoder = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(a, b, 3, stride=2, padding=1),
                nn.BatchNorm2d(b),
                nn.LeakyReLU(slope),
            )
            for a, b in zip(chans[:-1], chans[1:])
        )
        rev = chans[::-1]
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(a, b, 3, stride=2, padding=1) for a, b in zip(rev[:-1], rev[1:])
        )
        self.decoder_post = nn.ModuleList(
            [nn.Sequential(nn.BatchNorm2d(b), nn.LeakyReLU(slope)) for b in rev[1:-1]] + [nn.Sigmoid()]
        )

    def _check(self, x: torch.Tensor) -> None:
        w, h = self.config.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (1, h, w):
            raise ValidationError(f"ConvAE expects (N, 1, {h}, {w}) input, got {tuple(x.shape)}")

    def encode_with_shapes(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Size]]:
        self._check(x)
        shapes = []
        for layer in self.encoder:
            shapes.append(x.shape[-2:])
            x = layer(x)
        return x, shapes

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_with_shapes(x)[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z, shapes = self.encode_with_shapes(x)
        for deconv, post, size in zip(self.decoder, self.decoder_post, reversed(shapes)):
            z = post(deconv(z, output_size=size))
        return z


def reconstruction_error(x, reconstruction) -> float:
    """Mean squared difference over all elements."""
    x = torch.as_tensor(x, dtype=torch.float64)
    reconstruction = torch.as_tensor(reconstruction, dtype=torch.float64)
    if x.shape != reconstruction.shape:
        raise ValidationError(f"shape mismatch {tuple(x.shape)} vs {tuple(reconstruction.shape)}")
    return float(torch.mean((x - reconstruction) ** 2))


def per_sample_errors(x: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    if x.shape != reconstruction.shape:
        raise ValidationError(f"shape mismatch {tuple(x.shape)} vs {tuple(reconstruction.shape)}")
    return ((x - reconstruction) ** 2).reshape(x.shape[0], -1).mean(dim=1)
