"""Training losses: cosine distance in the embedding space, plus the
binary logistic (sigmoid cross-entropy) baseline.

Each loss returns value and analytic gradient together; the gradients
are exercised against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from .embedding import EmbeddingModel
from .layers import fixed_linear_backward, fixed_linear_forward

__all__ = ["LossOutput", "cosine_loss", "binary_logistic_loss", "embedded_cosine_loss"]

# Below this norm a direction is meaningless and the cosine is undefined.
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossOutput:
    value: float
    gradient: NDArray[np.float64]


def cosine_loss(y_hat: NDArray[np.float64], y: NDArray[np.float64]) -> LossOutput:
    """One minus the cosine similarity between prediction and target.

    value = 1 - (y_hat . y) / (|y_hat| |y|), in [0, 2]. The gradient
    w.r.t. y_hat vanishes exactly when y_hat is a positive multiple of y,
    and the loss is invariant to positive rescaling of either argument.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape or y_hat.ndim != 1:
        raise ValueError("cosine_loss expects two vectors of equal length")
    norm_hat = np.linalg.norm(y_hat)
    norm_y = np.linalg.norm(y)
    if norm_hat <= NORM_EPS or norm_y <= NORM_EPS:
        raise ValueError("degenerate direction: near-zero norm in cosine loss")
    dot = float(y_hat @ y)
    value = 1.0 - dot / (norm_hat * norm_y)
    grad = -(y / (norm_hat * norm_y) - dot * y_hat / (norm_hat**3 * norm_y))
    return LossOutput(value=value, gradient=grad)


def binary_logistic_loss(scores: NDArray[np.float64],
                         targets: NDArray[np.float64]) -> LossOutput:
    """Mean sigmoid cross-entropy of raw scores against 0/1 targets.

    Uses the overflow-free formulation
    ``max(s, 0) - s*t + log(1 + exp(-|s|))`` per entry; the gradient per
    entry is ``(sigmoid(s) - t) / n``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if scores.shape != targets.shape or scores.ndim != 1:
        raise ValueError("binary_logistic_loss expects two vectors of equal length")
    if np.any((targets != 0) & (targets != 1)):
        raise ValueError("targets must be binary")
    per_entry = np.maximum(scores, 0.0) - scores * targets + np.log1p(np.exp(-np.abs(scores)))
    n = scores.shape[0]
    return LossOutput(value=float(per_entry.mean()), gradient=(expit(scores) - targets) / n)


def embedded_cosine_loss(pooled_scores: NDArray[np.float64],
                         label_vector: NDArray[np.float64],
                         model: EmbeddingModel) -> LossOutput:
    """Cosine loss after projecting both arguments through the fixed
    embedding transform.

    The gradient w.r.t. the pooled scores is the embedding-space cosine
    gradient pulled back through the fixed linear layer's adjoint, so the
    error signal reaching the network is expressed in class-score space.
    Samples with an all-zero label vector have no target direction and
    must be skipped by the caller.
    """
    pooled_scores = np.asarray(pooled_scores, dtype=np.float64)
    label_vector = np.asarray(label_vector, dtype=np.float64)
    dim = model.class_dim
    if pooled_scores.shape != (dim,) or label_vector.shape != (dim,):
        raise ValueError(f"expected vectors of length {dim}")
    if not np.any(label_vector):
        raise ValueError("all-background sample: label vector is all zeros")
    z_hat = fixed_linear_forward(pooled_scores, model.transform)
    z = fixed_linear_forward(label_vector, model.transform)
    inner = cosine_loss(z_hat, z)
    return LossOutput(value=inner.value,
                      gradient=fixed_linear_backward(inner.gradient, model.transform))
