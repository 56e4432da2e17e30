"""Exact t-SNE for small feature sets.

Bandwidths are found per point by bisection on the perplexity, the
embedding by momentum gradient descent with per-coordinate gains. After the
early-exaggeration phase each step is accepted only if it does not raise the
KL divergence; otherwise the step is halved, so the recorded trace is
non-increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from shearad.errors import ValidationError

PERPLEXITY_TOL = 1e-4
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
_MACHINE_EPS = np.finfo(np.float64).tiny


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    labels: np.ndarray
    perplexity: float
    kl_final: float
    kl_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.coords)):
            raise ValidationError("embedding has non-finite coordinates")
        if len(self.coords) != len(self.labels):
            raise ValidationError("one label per embedded point required")


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Shannon entropy (nats) and probabilities of one conditional row."""
    shifted = d - d.min()
    p = np.exp(-shifted * beta)
    total = p.sum()
    p /= total
    h = float(beta * (shifted * p).sum() + math.log(total))
    return h, p


def conditional_affinities(x: np.ndarray, perplexity: float, max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic ``P(j|i)`` matching ``perplexity``; also returns the found betas."""
    n = len(x)
    d = _sq_distances(np.asarray(x, dtype=np.float64))
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        row = np.delete(d[i], i)
        lo, hi, beta = 0.0, math.inf, 1.0
        h, p = _row_entropy(row, beta)
        for _ in range(max_iter):
            if abs(math.exp(h) - perplexity) < PERPLEXITY_TOL:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if math.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _row_entropy(row, beta)
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    """Symmetrized ``(P + P^T) / 2N``; rows of the conditional matrix each sum to 1."""
    P, _ = conditional_affinities(x, perplexity)
    return (P + P.T) / (2.0 * len(x))


def _q_and_grad(P: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    num = 1.0 / (1.0 + _sq_distances(y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / num.sum(), _MACHINE_EPS)
    W = (P - Q) * num
    grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ y
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))
    return kl, grad


def tsne(
    features: np.ndarray,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    labels=None,
    learning_rate: float = 200.0,
) -> EmbeddingResult:
    """Embed ``features`` (N, D) into 2-D; deterministic given ``seed``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"features must be (N, D), got shape {x.shape}")
    n = len(x)
    if not perplexity > 0:
        raise ValidationError(f"perplexity must be positive, got {perplexity}")
    if n <= 3 * perplexity:
        raise ValidationError(f"{n} samples are too few for perplexity {perplexity} (need more than {3 * perplexity:g})")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features must be finite")
    labels = np.zeros(n, dtype=bool) if labels is None else np.asarray(labels, dtype=bool)

    P = np.maximum(joint_affinities(x, perplexity), _MACHINE_EPS)
    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    trace: list[float] = []

    exaggerated = min(EXAGGERATION_ITERS, iterations)
    for _ in range(exaggerated):
        _, grad = _q_and_grad(P * EXAGGERATION, y)
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2).clip(min=0.01)
        velocity = 0.5 * velocity - learning_rate * gains * grad
        y = y + velocity
        y -= y.mean(axis=0)

    kl, grad = _q_and_grad(P, y)
    trace.append(kl)
    for _ in range(iterations - exaggerated):
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2).clip(min=0.01)
        proposal = 0.8 * velocity - learning_rate * gains * grad
        for _ in range(30):
            y_new = y + proposal
            y_new -= y_new.mean(axis=0)
            kl_new, grad_new = _q_and_grad(P, y_new)
            if kl_new <= kl:
                break
            proposal *= 0.5
        else:
            # No descent found: stay put and drop the accumulated momentum.
            velocity = np.zeros_like(y)
            trace.append(kl)
            continue
        velocity, y, kl, grad = proposal, y_new, kl_new, grad_new
        trace.append(kl)
    return EmbeddingResult(y, labels, float(perplexity), max(kl, 0.0), trace)


def nearest_centroid_accuracy(coords: np.ndarray, labels) -> float:
    """Training accuracy of a two-class nearest-centroid rule in the embedding."""
    coords = np.asarray(coords, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValidationError("both classes are needed")
    c1, c0 = coords[labels].mean(axis=0), coords[~labels].mean(axis=0)
    pred = ((coords - c1) ** 2).sum(axis=1) < ((coords - c0) ** 2).sum(axis=1)
    return float((pred == labels).mean())
