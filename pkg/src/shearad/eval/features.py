"""Per-sample feature vectors for embedding."""

from __future__ import annotations

import numpy as np

from shearad.errors import ValidationError

FEATURE_SOURCES = ("latent", "pooled_backbone")


def default_source(kind: str) -> str:
    return "pooled_backbone" if kind == "STFPM" else "latent"


def extract_features(model, images, source: str | None = None, network: str = "student") -> np.ndarray:
    """Bottleneck codes (AE/ConvAE) or mean-pooled deepest pyramid features (STFPM).

    ``network`` picks the STFPM student or teacher trunk.
    """
    from shearad.models.training import latent_features

    source = source or default_source(model.kind)
    if source not in FEATURE_SOURCES:
        raise ValidationError(f"unknown feature source {source!r}")
    if source != default_source(model.kind):
        raise ValidationError(f"feature source {source!r} is not available for {model.kind} models")
    if network not in ("student", "teacher"):
        raise ValidationError(f"network must be 'student' or 'teacher', got {network!r}")
    return latent_features(model, images, network=network)
