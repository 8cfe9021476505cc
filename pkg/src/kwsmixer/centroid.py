"""Trainable keyword centroids: per-class MSE gradient steps on detached
latents, L2-distance features, and nearest-centroid classification.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import ContractError


@dataclass
class KeywordCentroids:
    """V0 tracks the negative class, V1 the positive keyword."""

    v0: np.ndarray
    v1: np.ndarray
    learning_rate: float = 0.01
    initialized: bool = False

    def __post_init__(self):
        self.v0 = np.asarray(self.v0, dtype=np.float64)
        self.v1 = np.asarray(self.v1, dtype=np.float64)
        if self.v0.shape != self.v1.shape or self.v0.ndim != 1:
            raise ContractError("centroids must be two vectors of equal dimension")

    @property
    def dim(self) -> int:
        return self.v0.shape[0]

    @classmethod
    def zeros(cls, dim: int, learning_rate: float = 0.01) -> "KeywordCentroids":
        return cls(np.zeros(dim), np.zeros(dim), learning_rate)


def centroid_sgd_step(latents: np.ndarray, labels: np.ndarray,
                      c: KeywordCentroids, lr: float | None = None) -> KeywordCentroids:
    """One gradient step per class on sum_i ||latent_i - V_class||^2.

    Latents must already be detached from the model graph. A class absent
    from the batch leaves its centroid untouched. Mutates and returns c.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    if latents.ndim != 2 or latents.shape[1] != c.dim:
        raise ContractError(
            f"latents {latents.shape} do not match centroid dimension {c.dim}"
        )
    if labels.shape != (latents.shape[0],):
        raise ContractError("labels must align with latents")
    eta = c.learning_rate if lr is None else lr
    if not c.initialized:
        # first batch: seed from class means where available
        for label, name in ((0, "v0"), (1, "v1")):
            sel = latents[labels == label]
            if len(sel):
                setattr(c, name, sel.mean(axis=0))
        c.initialized = True
        return c
    for label, name in ((0, "v0"), (1, "v1")):
        sel = latents[labels == label]
        if len(sel) == 0:
            continue
        v = getattr(c, name)
        grad = 2.0 * (len(sel) * v - sel.sum(axis=0))  # d/dv sum ||x - v||^2
        setattr(c, name, v - eta * grad)
    return c


def l2_features(latent: np.ndarray, c: KeywordCentroids) -> np.ndarray:
    """[distance to V0, distance to V1], both nonnegative."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape[-1] != c.dim:
        raise ContractError(f"latent dim {latent.shape[-1]} != centroid dim {c.dim}")
    d0 = np.linalg.norm(latent - c.v0, axis=-1)
    d1 = np.linalg.norm(latent - c.v1, axis=-1)
    return np.stack([d0, d1], axis=-1)


def nearest_centroid_classify(latent: np.ndarray, c: KeywordCentroids) -> np.ndarray:
    """argmin of the two distances; ties go to class 0."""
    d = l2_features(latent, c)
    return (d[..., 1] < d[..., 0]).astype(int)
