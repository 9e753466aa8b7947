"""Per-token conditioning sources for location-aware cross-attention.

Token cells are indexed ``[t, row, col]``.  The grounding kernel pairs the
column index with the trajectory's ``x`` and the row index with ``y``; both are
in latent-grid units, so cell ``(col=i, row=j)`` sits at coordinate ``(i, j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trajectory import LatentTrajectory, LocalText

GLOBAL = -1


@dataclass(frozen=True)
class GroundingParams:
    sigma: float = 1.0
    radius: float = 2.0
    gaussian_enabled: bool = True
    neighborhood_enabled: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.radius >= 0:
            raise ValueError("radius must be non-negative")

    @classmethod
    def point_only(cls) -> "GroundingParams":
        """Single-cell, unweighted grounding used for dense-track pretraining."""
        return cls(gaussian_enabled=False, neighborhood_enabled=False)


def gaussian_weight(center: tuple[float, float], cell: tuple[float, float], sigma: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x, y = center
    i, j = cell
    return math.exp(-((i - x) ** 2 + (j - y) ** 2) / (2.0 * sigma ** 2))


@dataclass(frozen=True)
class AssignmentField:
    """Which source every token attends to.

    ``owner[t, row, col]`` is a trajectory index or ``GLOBAL``; ``weight`` holds
    the Gaussian weight for owned cells and 1.0 for global cells.
    """

    owner: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        if self.owner.shape != self.weight.shape or self.owner.ndim != 3:
            raise ValueError("owner and weight must be matching (T, H, W) arrays")
        self.owner.setflags(write=False)
        self.weight.setflags(write=False)

    @classmethod
    def all_global(cls, grid: tuple[int, int, int]) -> "AssignmentField":
        return cls(np.full(grid, GLOBAL, dtype=np.int64), np.ones(grid))

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(self.owner.shape)

    @property
    def num_tokens(self) -> int:
        return self.owner.size

    def is_all_global(self) -> bool:
        return bool((self.owner == GLOBAL).all())

    def referenced(self) -> list[int]:
        return sorted(int(k) for k in np.unique(self.owner) if k != GLOBAL)

    def __eq__(self, other):
        if not isinstance(other, AssignmentField):
            return NotImplemented
        return np.array_equal(self.owner, other.owner) and np.array_equal(self.weight, other.weight)

    __hash__ = None


def build_assignment(trajs: Sequence[LatentTrajectory], grid: tuple[int, int, int],
                     params: GroundingParams) -> AssignmentField:
    T, H, W = grid
    for k, tr in enumerate(trajs):
        if len(tr) != T:
            raise ValueError(f"trajectory {k} has {len(tr)} latent steps, grid has {T}")
        xy = tr.xy[tr.visible]
        if xy.size and not ((xy[:, 0] >= 0).all() and (xy[:, 0] < W).all()
                            and (xy[:, 1] >= 0).all() and (xy[:, 1] < H).all()):
            raise ValueError(f"trajectory {k} leaves the {H}x{W} token grid")

    owner = np.full(grid, GLOBAL, dtype=np.int64)
    best = np.zeros(grid)
    cols = np.arange(W)[None, :]
    rows = np.arange(H)[:, None]
    two_s2 = 2.0 * params.sigma ** 2
    for k, tr in enumerate(trajs):
        for t in np.flatnonzero(tr.visible):
            x, y = tr.xy[t]
            d2 = (cols - x) ** 2 + (rows - y) ** 2
            if params.neighborhood_enabled:
                claim = d2 <= params.radius ** 2
            else:
                claim = np.zeros((H, W), dtype=bool)
                claim[min(int(np.rint(y)), H - 1), min(int(np.rint(x)), W - 1)] = True
            w = np.exp(-d2 / two_s2) if params.gaussian_enabled else np.ones((H, W))
            # strict comparison keeps the lower trajectory index on ties
            win = claim & (w > best[t])
            owner[t][win] = k
            best[t][win] = w[win]
    weight = np.where(owner == GLOBAL, 1.0, best)
    return AssignmentField(owner, weight)


@dataclass(frozen=True)
class SourceMap:
    """Resolved per-cell sources: ``features[index[t, r, c]]`` scaled by ``weight``.

    ``features[0]`` is the global feature; ``features[1 + k]`` belongs to
    trajectory ``k``.
    """

    features: tuple[np.ndarray, ...]
    index: np.ndarray
    weight: np.ndarray

    def feature_at(self, t: int, row: int, col: int) -> np.ndarray:
        return self.weight[t, row, col] * self.features[self.index[t, row, col]]


def conditioning_sources(field: AssignmentField, locals_: Sequence[LocalText],
                         global_feat: np.ndarray) -> SourceMap:
    feats = [np.asarray(global_feat)]
    for k in range(len(locals_)):
        feats.append(locals_[k].feature)
    for k in field.referenced():
        if k >= len(locals_):
            raise ValueError(f"field references trajectory {k} without a local text")
        if locals_[k].feature is None:
            raise ValueError(f"local text {locals_[k].id!r} has no encoded feature")
    width = feats[0].shape[1]
    for k in field.referenced():
        if locals_[k].feature.shape[1] != width:
            raise ValueError(f"local text {locals_[k].id!r} width differs from global feature")
    index = field.owner + 1
    index.setflags(write=False)
    return SourceMap(tuple(feats), index, field.weight)
