"""Trajectory end-point error, windowed local alignment and GSB preference."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .trajectory import Trajectory, VideoDims

DEFAULT_TAUS = (0.05, 0.10, 0.15, 0.20)


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class TrackPair:
    """A condition track and the track recovered from a generated video.

    Visibility always comes from the condition track.
    """

    condition: Trajectory
    estimated: Trajectory

    def __post_init__(self):
        if len(self.condition) != len(self.estimated):
            raise ValueError("condition and estimated tracks differ in length")


def epe(pair: TrackPair) -> float:
    vis = pair.condition.visible
    if not vis.any():
        raise UndefinedMetricError("EPE undefined: condition track has no visible frame")
    d = pair.condition.xy[vis] - pair.estimated.xy[vis]
    return float(np.mean(np.sqrt((d ** 2).sum(axis=1))))


def mean_epe(pairs_per_video: Sequence[Sequence[TrackPair]]) -> float:
    """Mean over visible frames, then over tracks, then over videos."""
    per_video = [np.mean([epe(p) for p in pairs]) for pairs in pairs_per_video if len(pairs)]
    if not per_video:
        raise UndefinedMetricError("no tracks to score")
    return float(np.mean(per_video))


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def pixel_slices(self) -> tuple[slice, slice]:
        """Rows and columns of every pixel the box touches (at least one)."""
        c0, r0 = int(math.floor(self.x0)), int(math.floor(self.y0))
        c1 = max(int(math.ceil(self.x1)), c0 + 1)
        r1 = max(int(math.ceil(self.y1)), r0 + 1)
        return slice(r0, r1), slice(c0, c1)


def local_windows(dims: VideoDims, traj: Trajectory, taus: Sequence[float] = DEFAULT_TAUS
                  ) -> list[tuple[int, float, Box]]:
    """Square crops of half-size ``tau * min(H, W)`` around every visible point.

    Returns ``(frame, tau, box)`` triples; boxes are clamped to the frame.
    """
    for tau in taus:
        if not 0 < tau <= 0.5:
            raise ValueError(f"tau {tau} outside (0, 0.5]")
    H, W = dims.height_px, dims.width_px
    out = []
    for t, (x, y, v) in enumerate(traj.points):
        if not v:
            continue
        for tau in taus:
            r = tau * min(H, W)
            box = Box(min(max(x - r, 0.0), W), min(max(y - r, 0.0), H),
                      min(max(x + r, 0.0), W), min(max(y + r, 0.0), H))
            out.append((t, tau, box))
    return out


class EmbedderInterface(Protocol):
    def embed_image(self, crop: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...

    def similarity(self, a: np.ndarray, b: np.ndarray) -> float: ...


def local_alignment(video: np.ndarray, traj: Trajectory, text: str, embedder: EmbedderInterface,
                    taus: Sequence[float] = DEFAULT_TAUS) -> float:
    """Mean image-text similarity over all (visible frame, tau) crops."""
    T, H, W = video.shape[:3]
    dims = VideoDims.from_scales(T, H, W)
    wins = local_windows(dims, traj, taus)
    if not wins:
        raise UndefinedMetricError("local alignment undefined: no visible frame")
    tv = embedder.embed_text(text)
    scores = []
    for t, _, box in wins:
        rs, cs = box.pixel_slices()
        crop = video[t, rs, cs]
        scores.append(embedder.similarity(embedder.embed_image(crop), tv))
    return float(np.mean(scores))


def gsb(g: int, s: int, b: int) -> float:
    """Good/same/bad preference score ``100 (G - B) / (G + S + B)``."""
    if min(g, s, b) < 0:
        raise ValueError("counts must be non-negative")
    n = g + s + b
    if n == 0:
        raise UndefinedMetricError("GSB undefined for zero comparisons")
    return 100.0 * (g - b) / n


class ConstantEmbedder:
    """Fixed vectors whose similarity is a chosen constant."""

    def __init__(self, value: float):
        self.value = value

    def embed_image(self, crop):
        return np.array([1.0])

    def embed_text(self, text):
        return np.array([self.value])

    def similarity(self, a, b):
        return float(np.dot(a, b))
