"""Image loading/saving helpers shared by the pipeline stages."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

import torch


def load_image(path: str | Path, size: Optional[int] = None) -> np.ndarray:
    """Read an RGB image as HxWx3 uint8, optionally resized to size x size."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def save_image(array: np.ndarray, path: str | Path) -> Path:
    """Write a HxWx3 uint8 array as a lossless PNG."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="RGB").save(p, format="PNG")
    return p


def to_float_batch(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Normalize an image to a (1, 3, H, W) float tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        t = image.to(torch.float32)
        if t.dim() == 3:
            t = t.unsqueeze(0)
        if t.max() > 1.5:
            t = t / 255.0
        return t
    arr = np.array(image, copy=True)
    t = torch.from_numpy(arr).to(torch.float32)
    if t.dim() == 2:
        t = t.unsqueeze(-1).expand(-1, -1, 3)
    if t.max() > 1.5:
        t = t / 255.0
    return t.permute(2, 0, 1).unsqueeze(0)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """Convert a (1|B, 3, H, W) float tensor in [0, 1] to HxWx3 uint8."""
    t = image.detach()
    if t.dim() == 4:
        t = t[0]
    t = (t.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    return t.permute(1, 2, 0).cpu().numpy()
