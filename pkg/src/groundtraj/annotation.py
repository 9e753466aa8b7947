"""Trajectory-text dataset construction.

Masks and frames go in, line-delimited JSON records come out.  Tracking and
labeling sit behind small protocols so a real point tracker or captioning
model can be dropped in; the package ships synthetic implementations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .trajectory import (LocalText, Trajectory, TrajectoryError, ValidationReport,
                         VideoDims, Violation, validate_trajectory)

SCHEMA_VERSION = 1

Point = tuple[float, float]


@dataclass(frozen=True)
class EntityMask:
    frame_index: int
    mask: np.ndarray
    entity_id: str

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be a 2-D grid")
        if not m.any():
            raise ValueError(f"mask for entity {self.entity_id!r} is empty")
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class DatasetRecord:
    global_caption: str
    trajectories: tuple[tuple[Trajectory, LocalText], ...]
    dims: VideoDims
    meta: dict = field(default_factory=dict)

    @property
    def local_texts(self) -> list[LocalText]:
        return [lt for _, lt in self.trajectories]

    def validate(self) -> ValidationReport:
        out = []
        seen = set()
        for k, (traj, lt) in enumerate(self.trajectories):
            if lt.id in seen:
                out.append(Violation("duplicate-text-id", None, f"track {k}: {lt.id!r}"))
            seen.add(lt.id)
            if traj.local_text_id != lt.id:
                out.append(Violation("text-binding", None,
                                     f"track {k} refers to {traj.local_text_id!r}, text is {lt.id!r}"))
            for v in validate_trajectory(traj, self.dims).violations:
                out.append(Violation(v.code, v.frame, f"track {k}: {v.detail}"))
        return ValidationReport(tuple(out))


class RecordError(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


class TrackerInterface(Protocol):
    def track_point(self, frames: np.ndarray, seed: Point) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(xy (T, 2), visible (T,))`` for one query point on frame 0."""


class LabelerInterface(Protocol):
    def label(self, frame: np.ndarray, point: Point) -> str:
        """Describe the entity at ``point``."""


# ---------------------------------------------------------------- point selection


def point_nms(points: Sequence[Point], radius: float, rng: np.random.Generator) -> list[Point]:
    """Greedy suppression in a random visiting order.

    A point survives if no earlier survivor lies within ``radius``.  Survivors
    are returned in input order.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    keep = np.zeros(len(pts), dtype=bool)
    kept: list[int] = []
    for i in rng.permutation(len(pts)):
        if kept:
            d = np.hypot(*(pts[kept] - pts[i]).T)
            if (d <= radius).any():
                continue
        kept.append(i)
        keep[i] = True
    return [tuple(p) for p in pts[keep].tolist()]


def _bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return cols[0], cols[-1], rows[0], rows[-1]


def _bbox_center(x0, x1, y0, y1) -> Point:
    # half-open pixel boxes: pixel k spans [k, k + 1)
    return ((x0 + x1 + 1) / 2.0, (y0 + y1 + 1) / 2.0)


def grid_shape(bbox_h: int, bbox_w: int, threshold: float) -> tuple[int, int]:
    side = max(1, math.isqrt(int(math.floor(threshold))))
    return math.ceil(bbox_h / side), math.ceil(bbox_w / side)


def representative_points(mask: EntityMask | np.ndarray, threshold_frac: float = 0.01) -> list[Point]:
    """Anchor points for one entity.

    Entities with fewer than ``threshold_frac * H * W`` foreground pixels get
    their bounding-box center.  Larger ones have the bounding box cut into
    near-square cells of at most the threshold area and emit the center of
    the foreground bounding box inside every non-empty cell.
    """
    if threshold_frac <= 0:
        raise ValueError("threshold_frac must be positive")
    m = mask.mask if isinstance(mask, EntityMask) else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    H, W = m.shape
    threshold = threshold_frac * H * W
    x0, x1, y0, y1 = _bbox(m)
    if m.sum() < threshold:
        return [_bbox_center(x0, x1, y0, y1)]
    bh, bw = y1 - y0 + 1, x1 - x0 + 1
    nr, nc = grid_shape(bh, bw, threshold)
    redges = y0 + (np.arange(nr + 1) * bh) // nr
    cedges = x0 + (np.arange(nc + 1) * bw) // nc
    out = []
    for r in range(nr):
        for c in range(nc):
            sub = m[redges[r]:redges[r + 1], cedges[c]:cedges[c + 1]]
            if not sub.any():
                continue
            sx0, sx1, sy0, sy1 = _bbox(sub)
            out.append(_bbox_center(sx0 + cedges[c], sx1 + cedges[c], sy0 + redges[r], sy1 + redges[r]))
    return out


# ---------------------------------------------------------------- tracking


@dataclass(frozen=True)
class TrackOutcome:
    seed: Point
    trajectory: Trajectory | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.trajectory is not None


def track(tracker: TrackerInterface, frames: np.ndarray, seeds: Sequence[Point]) -> list[TrackOutcome]:
    """Propagate frame-0 seeds through ``frames``; failures stay per point."""
    T, H, W = frames.shape[:3]
    out = []
    for k, seed in enumerate(seeds):
        sx, sy = float(seed[0]), float(seed[1])
        if not (0 <= sx < W and 0 <= sy < H):
            out.append(TrackOutcome((sx, sy), None, f"seed {k} outside the {W}x{H} frame"))
            continue
        try:
            xy, vis = tracker.track_point(frames, (sx, sy))
            xy = np.array(xy, dtype=float).reshape(T, 2)
            vis = np.array(vis, dtype=bool).reshape(T)
        except Exception as exc:  # noqa: BLE001 - a tracker may fail in any way
            out.append(TrackOutcome((sx, sy), None, f"seed {k}: {exc}"))
            continue
        xy[0] = (sx, sy)
        vis[0] = True
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < W) & (xy[:, 1] >= 0) & (xy[:, 1] < H)
        vis &= inside
        out.append(TrackOutcome((sx, sy), Trajectory.from_arrays(xy, vis, f"m{k}")))
    return out


def build_record(global_caption: str, tracked: Sequence[TrackOutcome], labels: Sequence[str],
                 dims: VideoDims, meta: dict | None = None) -> DatasetRecord:
    if len(labels) != len(tracked):
        raise ValueError(f"{len(labels)} labels for {len(tracked)} tracked points")
    pairs = []
    skipped = []
    for k, (tr, lab) in enumerate(zip(tracked, labels)):
        if not tr.ok:
            skipped.append(tr.error)
            continue
        tid = f"m{k}"
        traj = Trajectory(tr.trajectory.points, tid)
        pairs.append((traj, LocalText(tid, lab)))
    meta = dict(meta or {})
    if skipped:
        meta["skipped_tracks"] = skipped
    rec = DatasetRecord(global_caption, tuple(pairs), dims, meta)
    report = rec.validate()
    if report:
        raise RecordError(report)
    return rec


def annotate_scene(frames: np.ndarray, masks: Sequence[EntityMask], caption: str,
                   tracker: TrackerInterface, labeler: LabelerInterface,
                   rng: np.random.Generator, threshold_frac: float = 0.01,
                   nms_radius: float = 0.0, meta: dict | None = None) -> DatasetRecord:
    """Masks on one frame to a validated record: sample, de-duplicate, label, track."""
    T, H, W = frames.shape[:3]
    seeds: list[Point] = []
    for m in masks:
        seeds.extend(representative_points(m, threshold_frac))
    if nms_radius > 0:
        seeds = point_nms(seeds, nms_radius, rng)
    tracked = track(tracker, frames, seeds)
    labels = [labeler.label(frames[0], s) for s in seeds]
    return build_record(caption, tracked, labels, VideoDims.from_scales(T, H, W), meta)


# ---------------------------------------------------------------- serialization


def record_to_dict(rec: DatasetRecord) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "caption": rec.global_caption,
        "dims": {"frames": rec.dims.frames, "h": rec.dims.height_px, "w": rec.dims.width_px},
        "tracks": [
            {"id": lt.id, "text": lt.text,
             "pts": [[x, y, int(v)] for x, y, v in traj.points]}
            for traj, lt in rec.trajectories
        ],
        "meta": rec.meta,
    }


def record_from_dict(d: dict) -> DatasetRecord:
    if d.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported record version {d.get('version')!r}")
    dims = VideoDims.from_scales(d["dims"]["frames"], d["dims"]["h"], d["dims"]["w"])
    pairs = []
    for tr in d["tracks"]:
        tid = tr["id"]
        pts = tuple((float(x), float(y), bool(v)) for x, y, v in tr["pts"])
        pairs.append((Trajectory(pts, tid), LocalText(tid, tr["text"])))
    return DatasetRecord(d["caption"], tuple(pairs), dims, d.get("meta", {}))


def serialize(rec: DatasetRecord) -> str:
    return json.dumps(record_to_dict(rec), sort_keys=True, allow_nan=False)


def parse(line: str) -> DatasetRecord:
    rec = record_from_dict(json.loads(line))
    report = rec.validate()
    if report:
        raise RecordError(report)
    return rec


def write_dataset(path: str | Path, records: Iterable[DatasetRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(serialize(rec) + "\n")
            n += 1
    return n


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        return [parse(line) for line in fh if line.strip()]
