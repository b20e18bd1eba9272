"""Synthetic face-like test images: an oval on a gradient, nothing more."""
from __future__ import annotations

import numpy as np


def synthetic_face(seed: int, size: int = 32) -> np.ndarray:
    """Deterministic face-ish RGB image: background, oval head, eyes, mouth.

    Brightness varies with the seed so intensity-based stubs see a spread of
    "ages" across a generated set.
    """
    rng = np.random.default_rng(seed)
    base = rng.integers(40, 200)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, 3), dtype=np.float64)
    for c in range(3):
        img[:, :, c] = base + (yy / size) * rng.integers(-30, 30)

    cx, cy = size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2)
    rx, ry = size * 0.30 + rng.uniform(-2, 2), size * 0.38 + rng.uniform(-2, 2)
    head = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    skin = np.array([base * 1.2 + 20, base * 1.05, base * 0.9])
    img[head] = skin

    for ex in (cx - rx * 0.45, cx + rx * 0.45):
        eye = ((xx - ex) ** 2 + (yy - (cy - ry * 0.25)) ** 2) <= (size * 0.05) ** 2
        img[eye] = [20, 20, 30]
    mouth = (np.abs(yy - (cy + ry * 0.45)) <= 1.0) & (np.abs(xx - cx) <= rx * 0.4)
    img[mouth] = [120, 40, 40]

    return np.clip(img, 0, 255).astype(np.uint8)


def synthetic_face_set(seed: int, count: int, size: int = 32) -> list[np.ndarray]:
    return [synthetic_face(seed * 100_003 + i, size=size) for i in range(count)]
