"""Synthetic moving-blob videos with known trajectories and texts.

Videos are ``(T, H, W, C)`` float volumes rendered directly at latent
resolution.  Pixel ``k`` spans ``[k, k + 1)`` and is sampled at its center.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .annotation import DatasetRecord, EntityMask, Point
from .trajectory import LocalText, Trajectory, VideoDims

COLORS = ("red", "green", "blue")
SHAPES = ("circle", "square")
MOTIONS = ("linear", "circular", "static")


class WorldError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlobWorldConfig:
    frames: int = 8
    height: int = 16
    width: int = 16
    channels: int = 1
    min_blobs: int = 1
    max_blobs: int = 3
    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES
    motions: tuple[str, ...] = MOTIONS
    blob_sigma: float = 1.2
    max_speed: float = 1.0
    edge_margin: float = 1.0
    min_separation: float = 4.0
    dense_ring: int = 6
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("colors", "shapes", "motions"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.colors or not self.shapes or not self.motions:
            raise ValueError("attribute vocabulary must be non-empty")
        unknown = set(self.colors) - set(PALETTE_RGB)
        if unknown:
            raise ValueError(f"no palette entry for {sorted(unknown)}")
        if set(self.motions) - set(MOTIONS):
            raise ValueError(f"motions must come from {MOTIONS}")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ValueError("need 1 <= min_blobs <= max_blobs")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if 2 * self.edge_margin >= min(self.height, self.width):
            raise ValueError("frame too small for the edge margin")

    @property
    def dims(self) -> VideoDims:
        return VideoDims.from_scales(self.frames, self.height, self.width)

    def to_dict(self) -> dict:
        return asdict(self)


PALETTE_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
# single-channel worlds encode color as brightness
PALETTE_GRAY = {"red": 1.0, "green": 0.75, "blue": 0.5, "yellow": 0.875, "white": 0.625}


def color_vector(color: str, channels: int) -> np.ndarray:
    if channels == 1:
        return np.array([PALETTE_GRAY[color]])
    return np.array(PALETTE_RGB[color])


@dataclass(frozen=True)
class Blob:
    color: str
    shape: str
    motion: str
    xy: np.ndarray = field(repr=False)
    visible: np.ndarray = field(repr=False)

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


def _render_blob(blob_xy: tuple[float, float], shape: str, sigma: float, H: int, W: int) -> np.ndarray:
    x, y = blob_xy
    px = np.arange(W) + 0.5
    py = np.arange(H) + 0.5
    if shape == "circle":
        gx = np.exp(-(px - x) ** 2 / (2 * sigma ** 2))
        gy = np.exp(-(py - y) ** 2 / (2 * sigma ** 2))
    else:
        half, soft = 1.25 * sigma, 0.3
        gx = 1.0 / (1.0 + np.exp(-(half - np.abs(px - x)) / soft))
        gy = 1.0 / (1.0 + np.exp(-(half - np.abs(py - y)) / soft))
    return gy[:, None] * gx[None, :]


def render(blobs: Sequence[Blob], cfg: BlobWorldConfig) -> np.ndarray:
    """Blobs as smooth bumps; overlapping blobs combine by per-channel max."""
    T, H, W, C = cfg.frames, cfg.height, cfg.width, cfg.channels
    out = np.zeros((T, H, W, C))
    for b in blobs:
        col = color_vector(b.color, C)
        for t in range(T):
            bump = _render_blob(tuple(b.xy[t]), b.shape, cfg.blob_sigma, H, W)
            np.maximum(out[t], bump[..., None] * col, out=out[t])
    return out


def _inside(xy: np.ndarray, cfg: BlobWorldConfig) -> np.ndarray:
    m = cfg.edge_margin
    return ((xy[:, 0] >= m) & (xy[:, 0] < cfg.width - m)
            & (xy[:, 1] >= m) & (xy[:, 1] < cfg.height - m))


def _path(motion: str, start: np.ndarray, cfg: BlobWorldConfig, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(cfg.frames)[:, None]
    if motion == "static":
        return np.repeat(start[None], cfg.frames, axis=0)
    if motion == "linear":
        ang = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.0) * cfg.max_speed
        v = speed * np.array([np.cos(ang), np.sin(ang)])
        return start[None] + t * v[None]
    radius = rng.uniform(1.5, 3.5)
    omega = rng.choice([-1, 1]) * rng.uniform(0.25, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    center = start - radius * np.array([np.cos(phase), np.sin(phase)])
    ang = phase + omega * t[:, 0]
    return center[None] + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def sample_blobs(cfg: BlobWorldConfig, rng: np.random.Generator, n: int | None = None) -> list[Blob]:
    n = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1)) if n is None else n
    m = cfg.edge_margin
    for _ in range(cfg.max_retries):
        starts = np.stack([rng.uniform(m, cfg.width - m, n), rng.uniform(m, cfg.height - m, n)], axis=1)
        if n > 1:
            d = np.hypot(*(starts[:, None] - starts[None]).transpose(2, 0, 1))
            if d[np.triu_indices(n, 1)].min() < cfg.min_separation:
                continue
        blobs = []
        for k in range(n):
            motion = str(rng.choice(cfg.motions))
            xy = _path(motion, starts[k], cfg, rng)
            blobs.append(Blob(str(rng.choice(cfg.colors)), str(rng.choice(cfg.shapes)), motion,
                              xy, _inside(xy, cfg)))
        return blobs
    raise WorldError(f"could not place {n} blobs {cfg.min_separation} apart "
                     f"after {cfg.max_retries} tries")


def caption_for(blobs: Sequence[Blob]) -> str:
    names = [f"a {b.phrase}" for b in blobs]
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _ring(b: Blob, cfg: BlobWorldConfig) -> list[np.ndarray]:
    pts = [b.xy]
    r = cfg.blob_sigma
    for k in range(cfg.dense_ring):
        a = 2 * np.pi * k / cfg.dense_ring
        pts.append(b.xy + r * np.array([np.cos(a), np.sin(a)]))
    return pts


def records_for(blobs: Sequence[Blob], cfg: BlobWorldConfig, dense: bool = False) -> DatasetRecord:
    """Ground-truth record; ``dense`` adds a ring of tracks around every center."""
    pairs = []
    for k, b in enumerate(blobs):
        paths = _ring(b, cfg) if dense else [b.xy]
        for j, xy in enumerate(paths):
            tid = f"b{k}" if j == 0 else f"b{k}r{j}"
            vis = b.visible & (xy[:, 0] >= 0) & (xy[:, 0] < cfg.width) & (xy[:, 1] >= 0) & (xy[:, 1] < cfg.height)
            if not vis.any():
                continue
            pairs.append((Trajectory.from_arrays(xy, vis, tid), LocalText(tid, b.phrase)))
    meta = {"source": "blob-world", "motions": [b.motion for b in blobs]}
    return DatasetRecord(caption_for(blobs), tuple(pairs), cfg.dims, meta)


@dataclass(frozen=True)
class WorldSample:
    latent: np.ndarray
    record: DatasetRecord
    dense_record: DatasetRecord
    blobs: tuple[Blob, ...]


def generate_world(cfg: BlobWorldConfig, count: int, offset: int = 0) -> list[WorldSample]:
    """``count`` scenes; scene ``i`` depends only on ``(cfg.seed, offset + i)``."""
    out = []
    for i in range(offset, offset + count):
        rng = np.random.default_rng([cfg.seed, i])
        blobs = sample_blobs(cfg, rng)
        latent = render(blobs, cfg).astype(np.float32)
        out.append(WorldSample(latent, records_for(blobs, cfg), records_for(blobs, cfg, dense=True),
                               tuple(blobs)))
    return out


def scene_masks(sample: WorldSample, cfg: BlobWorldConfig, level: float = 0.5) -> list[EntityMask]:
    """Frame-0 entity masks: pixels where a blob reaches ``level`` of its peak."""
    masks = []
    for k, b in enumerate(sample.blobs):
        if not b.visible[0]:
            continue
        bump = _render_blob(tuple(b.xy[0]), b.shape, cfg.blob_sigma, cfg.height, cfg.width)
        m = bump >= level * bump.max()
        if m.any():
            masks.append(EntityMask(0, m, f"b{k}"))
    return masks


# ---------------------------------------------------------------- trackers


def intensity(video: np.ndarray) -> np.ndarray:
    """Per-pixel brightness: the largest channel value, negatives clipped."""
    return np.clip(video, 0, None).max(axis=-1)


def blob_centroid_tracker(video: np.ndarray, seeds: Sequence[Point], threshold: float = 0.25
                          ) -> list[Trajectory]:
    """Follow bright regions from frame-0 seeds.

    In every frame the connected region above ``threshold`` whose weighted
    centroid is nearest the previous position is taken; frames without any
    region are invisible and keep the previous position.
    """
    inten = intensity(np.asarray(video, dtype=float))
    T, H, W = inten.shape
    regions = []
    for t in range(T):
        lab, n = ndimage.label(inten[t] > threshold)
        if n == 0:
            regions.append(np.zeros((0, 2)))
            continue
        idx = np.arange(1, n + 1)
        w = ndimage.sum(inten[t], lab, idx)
        rr, cc = np.mgrid[:H, :W]
        cx = ndimage.sum(inten[t] * (cc + 0.5), lab, idx) / w
        cy = ndimage.sum(inten[t] * (rr + 0.5), lab, idx) / w
        regions.append(np.stack([cx, cy], axis=1))
    out = []
    for k, seed in enumerate(seeds):
        prev = np.array(seed, dtype=float)
        xy = np.zeros((T, 2))
        vis = np.zeros(T, dtype=bool)
        for t in range(T):
            cand = regions[t]
            if len(cand):
                j = int(np.argmin(((cand - prev) ** 2).sum(axis=1)))
                prev = cand[j]
                vis[t] = True
            xy[t] = prev
        out.append(Trajectory.from_arrays(xy, vis, f"est{k}"))
    return out


class CentroidTracker:
    """:class:`~groundtraj.annotation.TrackerInterface` over rendered frames."""

    def __init__(self, threshold: float = 0.25):
        self.threshold = threshold

    def track_point(self, frames, seed):
        tr = blob_centroid_tracker(frames, [seed], self.threshold)[0]
        return tr.xy, tr.visible


class OracleTracker:
    """Reads positions off the generator's ground truth.

    The seed is attached to the blob nearest to it on frame 0 and follows that
    blob rigidly; it is invisible whenever the blob is.
    """

    def __init__(self, sample: WorldSample):
        self.blobs = sample.blobs

    def track_point(self, frames, seed):
        s = np.asarray(seed, dtype=float)
        d = [np.hypot(*(b.xy[0] - s)) for b in self.blobs]
        b = self.blobs[int(np.argmin(d))]
        return b.xy + (s - b.xy[0]), b.visible.copy()


class OracleLabeler:
    """Phrase of the ground-truth blob nearest to the queried point."""

    def __init__(self, sample: WorldSample):
        self.blobs = sample.blobs

    def label(self, frame, point):
        s = np.asarray(point, dtype=float)
        d = [np.hypot(*(b.xy[0] - s)) for b in self.blobs]
        return self.blobs[int(np.argmin(d))].phrase


def nearest_color(value: np.ndarray, colors: Sequence[str] = COLORS) -> str:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    ref = np.stack([color_vector(c, value.size) for c in colors])
    return colors[int(np.argmin(((ref - value) ** 2).sum(axis=1)))]


class PaletteLabeler:
    """Names the palette color at the queried pixel."""

    def __init__(self, colors: Sequence[str] = COLORS):
        self.colors = tuple(colors)

    def label(self, frame, point):
        H, W = frame.shape[:2]
        c = min(int(point[0]), W - 1)
        r = min(int(point[1]), H - 1)
        return f"{nearest_color(frame[r, c], self.colors)} blob"


class ColorEmbedder:
    """Test embedder: one-hot palette color of the brightest pixel vs color words.

    Image and text similarity is 1.0 exactly when the crop's dominant color is
    the color named in the text.
    """

    def __init__(self, colors: Sequence[str] = COLORS, threshold: float = 0.25):
        self.colors = tuple(colors)
        self.threshold = threshold

    def embed_image(self, crop):
        crop = np.asarray(crop, dtype=float)
        v = np.zeros(len(self.colors))
        inten = intensity(crop)
        if inten.size == 0 or inten.max() < self.threshold:
            return v
        r, c = np.unravel_index(np.argmax(inten), inten.shape)
        v[self.colors.index(nearest_color(np.clip(crop[r, c], 0, None), self.colors))] = 1.0
        return v

    def embed_text(self, text):
        v = np.zeros(len(self.colors))
        for w in text.lower().split():
            if w in self.colors:
                v[self.colors.index(w)] = 1.0
                break
        return v

    def similarity(self, a, b):
        return float(np.dot(a, b))
