"""Trajectories in pixel and latent-grid coordinates.

Pixel coordinates use the area convention: pixel ``k`` spans ``[k, k+1)``, so a
visible point satisfies ``0 <= x < width_px``.  Latent coordinates are pixel
coordinates divided by the spatial scale and are compared directly against
integer token indices by the grounding kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class VideoDims:
    frames: int
    height_px: int
    width_px: int
    latent_t: int
    latent_h: int
    latent_w: int
    spatial_scale: int = 1
    temporal_scale: int = 1

    def __post_init__(self):
        if self.spatial_scale < 1 or self.temporal_scale < 1:
            raise ValueError("scales must be positive integers")
        for name, px, lat, s in (
            ("frames", self.frames, self.latent_t, self.temporal_scale),
            ("height", self.height_px, self.latent_h, self.spatial_scale),
            ("width", self.width_px, self.latent_w, self.spatial_scale),
        ):
            if not (lat * s >= px > lat * s - s):
                raise ValueError(f"{name}: latent size {lat} x scale {s} is not the ceiling of {px}")

    @classmethod
    def from_scales(cls, frames: int, height_px: int, width_px: int,
                    spatial_scale: int = 1, temporal_scale: int = 1) -> "VideoDims":
        return cls(
            frames, height_px, width_px,
            latent_t=math.ceil(frames / temporal_scale),
            latent_h=math.ceil(height_px / spatial_scale),
            latent_w=math.ceil(width_px / spatial_scale),
            spatial_scale=spatial_scale,
            temporal_scale=temporal_scale,
        )

    @property
    def latent_grid(self) -> tuple[int, int, int]:
        return (self.latent_t, self.latent_h, self.latent_w)


@dataclass(frozen=True)
class LocalText:
    """Entity description bound to one or more trajectories.

    ``feature`` is the encoded text (tokens x D); it is attached after encoding.
    """

    id: str
    text: str
    feature: np.ndarray | None = field(default=None, compare=False, repr=False)

    def with_feature(self, feature: np.ndarray) -> "LocalText":
        feature = np.asarray(feature)
        if feature.ndim != 2:
            raise ValueError("local text feature must be a (tokens, D) matrix")
        return LocalText(self.id, self.text, feature)


@dataclass(frozen=True)
class Trajectory:
    """Per-frame ``(x, y, visible)`` points bound to a local text id."""

    points: tuple[tuple[float, float, bool], ...]
    local_text_id: str

    def __post_init__(self):
        pts = tuple((float(x), float(y), bool(v)) for x, y, v in self.points)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_arrays(cls, xy: np.ndarray, visible: Iterable[bool], local_text_id: str) -> "Trajectory":
        xy = np.asarray(xy, dtype=float)
        return cls(tuple((x, y, v) for (x, y), v in zip(xy.tolist(), visible)), local_text_id)

    @classmethod
    def static(cls, x: float, y: float, frames: int, local_text_id: str,
               hold: bool = True) -> "Trajectory":
        """A point given on frame 0 only.

        By default the point is held constant; with ``hold=False`` later frames
        are marked invisible.
        """
        pts = [(x, y, True)] + [(x, y, hold)] * (frames - 1)
        return cls(tuple(pts), local_text_id)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xy(self) -> np.ndarray:
        return np.array([(p[0], p[1]) for p in self.points], dtype=float).reshape(-1, 2)

    @property
    def visible(self) -> np.ndarray:
        return np.array([p[2] for p in self.points], dtype=bool)


@dataclass(frozen=True)
class Violation:
    code: str
    frame: int | None
    detail: str

    def __str__(self) -> str:
        where = "" if self.frame is None else f" at frame {self.frame}"
        return f"{self.code}{where}: {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    def __bool__(self) -> bool:
        # truthy when there is something to report
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def __str__(self) -> str:
        return "; ".join(str(v) for v in self.violations) or "ok"


class TrajectoryError(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


def validate_trajectory(traj: Trajectory, dims: VideoDims) -> ValidationReport:
    out: list[Violation] = []
    if len(traj) != dims.frames:
        out.append(Violation("length-mismatch", None,
                             f"{len(traj)} points for {dims.frames} frames"))
    any_visible = False
    for t, (x, y, v) in enumerate(traj.points):
        if not v:
            continue
        any_visible = True
        if not (math.isfinite(x) and math.isfinite(y)):
            out.append(Violation("non-finite", t, f"({x}, {y})"))
        elif not (0.0 <= x < dims.width_px and 0.0 <= y < dims.height_px):
            out.append(Violation("out-of-bounds", t,
                                 f"({x}, {y}) outside {dims.width_px}x{dims.height_px}"))
    if not any_visible:
        out.append(Violation("no-visible-point", None, "trajectory is never visible"))
    return ValidationReport(tuple(out))


@dataclass(frozen=True)
class LatentTrajectory:
    """Trajectory resampled to latent timesteps, coordinates in token units.

    Invisible steps carry ``nan`` coordinates.
    """

    xy: np.ndarray
    visible: np.ndarray
    local_text_id: str

    def __len__(self) -> int:
        return len(self.visible)


def to_latent(traj: Trajectory, dims: VideoDims) -> LatentTrajectory:
    report = validate_trajectory(traj, dims)
    if report:
        raise TrajectoryError(report)
    xy = traj.xy / dims.spatial_scale
    vis = traj.visible
    out_xy = np.full((dims.latent_t, 2), np.nan)
    out_vis = np.zeros(dims.latent_t, dtype=bool)
    ts = dims.temporal_scale
    for tau in range(dims.latent_t):
        sl = slice(tau * ts, min((tau + 1) * ts, dims.frames))
        v = vis[sl]
        if v.any():
            out_vis[tau] = True
            out_xy[tau] = xy[sl][v].mean(axis=0)
    out_xy.setflags(write=False)
    out_vis.setflags(write=False)
    return LatentTrajectory(out_xy, out_vis, traj.local_text_id)


def latent_trajectories(trajs: Sequence[Trajectory], dims: VideoDims) -> list[LatentTrajectory]:
    return [to_latent(t, dims) for t in trajs]
