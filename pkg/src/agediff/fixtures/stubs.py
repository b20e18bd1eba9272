"""Stub estimator and embedder for metric plumbing tests."""
from __future__ import annotations

import numpy as np
import torch

from ..imageio import to_float_batch


class MeanIntensityAgeEstimator:
    """Age stub: round(mean_pixel / 255 * 100), clamped to [0, 100].

    An all-black image therefore estimates age 0 and an all-white one 100.
    Deterministic and safe for concurrent calls.
    """

    concurrent_safe = True

    def estimate(self, image) -> int:
        arr = np.asarray(image, dtype=np.float64)
        if arr.max() <= 1.5:  # already normalized
            arr = arr * 255.0
        age = int(round(float(arr.mean()) / 255.0 * 100.0))
        return max(0, min(100, age))


class ConstantAgeEstimator:
    """Always answers the same age; handy for relabeling tests."""

    concurrent_safe = True

    def __init__(self, age: int):
        self.age = int(age)

    def estimate(self, image) -> int:
        return self.age


class FailingAgeEstimator:
    """Raises for image paths whose pixels match a marker; wraps another stub."""

    concurrent_safe = True

    def __init__(self, inner, fail_when):
        self.inner = inner
        self.fail_when = fail_when

    def estimate(self, image) -> int:
        if self.fail_when(image):
            raise RuntimeError("synthetic estimator failure")
        return self.inner.estimate(image)


class ToyFaceEmbedder(torch.nn.Module):
    """Unit-norm embedding via a fixed seeded projection of the pixels.

    Accepts HxWx3 uint8 arrays or (B, 3, H, W) float tensors; the projection
    keeps gradients when fed tensors, so it can sit inside a training loss.
    """

    def __init__(self, seed: int = 0, dim: int = 16, image_size: int = 32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        proj = torch.randn(image_size * image_size * 3, dim, generator=gen)
        self.register_buffer("projection", proj / (image_size * 3.0))
        self.dim = dim

    def embed(self, image) -> torch.Tensor:
        x = to_float_batch(image)
        flat = x.reshape(x.shape[0], -1)
        feats = flat @ self.projection
        return torch.nn.functional.normalize(feats, dim=1)
