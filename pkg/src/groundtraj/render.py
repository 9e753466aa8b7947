"""Frame-grid images for visual inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def frame_grid(videos: np.ndarray, scale: int = 8, gap: int = 1) -> np.ndarray:
    """Tile ``(N, T, H, W, C)`` videos into one uint8 image: one row per video."""
    n, T, H, W, C = videos.shape
    img = np.full((n * (H + gap) - gap, T * (W + gap) - gap, 3), 64, dtype=np.uint8)
    v = np.clip(videos, 0.0, 1.0)
    if C == 1:
        v = np.repeat(v, 3, axis=-1)
    v = (v[..., :3] * 255).round().astype(np.uint8)
    for i in range(n):
        for t in range(T):
            r, c = i * (H + gap), t * (W + gap)
            img[r:r + H, c:c + W] = v[i, t]
    return np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))


def save_frame_grid(path: str | Path, videos: np.ndarray, scale: int = 8) -> None:
    Image.fromarray(frame_grid(np.asarray(videos), scale)).save(path)
