import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundtraj.grounding import (GLOBAL, AssignmentField, GroundingParams, build_assignment,
                                  conditioning_sources, gaussian_weight)
from groundtraj.trajectory import LatentTrajectory, LocalText


def lat(points, vis=None, tid="m"):
    xy = np.array(points, dtype=float)
    vis = np.ones(len(xy), bool) if vis is None else np.array(vis, bool)
    xy[~vis] = np.nan
    return LatentTrajectory(xy, vis, tid)


def brute_force_field(trajs, grid, params):
    """Per-cell re-derivation: candidate sources, then the largest weight, lowest index."""
    T, H, W = grid
    owner = np.full(grid, GLOBAL)
    weight = np.ones(grid)
    for t in range(T):
        for row in range(H):
            for col in range(W):
                best_k, best_w = GLOBAL, 0.0
                for k, tr in enumerate(trajs):
                    if not tr.visible[t]:
                        continue
                    x, y = tr.xy[t]
                    if params.neighborhood_enabled:
                        inside = math.hypot(col - x, row - y) <= params.radius
                    else:
                        inside = (row, col) == (min(round(y), H - 1), min(round(x), W - 1))
                    if not inside:
                        continue
                    w = gaussian_weight((x, y), (col, row), params.sigma) if params.gaussian_enabled else 1.0
                    if w > best_w:
                        best_k, best_w = k, w
                if best_k != GLOBAL:
                    owner[t, row, col] = best_k
                    weight[t, row, col] = best_w
    return owner, weight


def test_gaussian_weight_values():
    assert gaussian_weight((3.0, 3.0), (3, 3), 1.0) == 1.0
    assert gaussian_weight((3.0, 3.0), (4, 3), 1.0) == pytest.approx(0.606531, abs=1e-6)
    assert gaussian_weight((3.0, 3.0), (4, 4), 1.0) == pytest.approx(0.367879, abs=1e-6)
    with pytest.raises(ValueError):
        gaussian_weight((0, 0), (0, 0), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 3))
def test_gaussian_symmetric_and_decreasing(x, y, i, j, sigma):
    w = gaussian_weight((x, y), (i, j), sigma)
    assert w == gaussian_weight((i, j), (x, y), sigma)
    assert 0 <= w <= 1
    farther = gaussian_weight((x, y), (i + math.copysign(0.5, i - x or 1), j), sigma)
    assert farther < w or farther == w == 0.0


def test_radius_two_disk_has_thirteen_cells():
    f = build_assignment([lat([(4.0, 4.0)])], (1, 9, 9), GroundingParams(sigma=1, radius=2))
    lattice = sum(1 for di in range(-2, 3) for dj in range(-2, 3) if di * di + dj * dj <= 4)
    assert lattice == 13
    assert (f.owner == 0).sum() == 13
    assert (f.owner == GLOBAL).sum() == 81 - 13


def test_invisible_timestep_is_global():
    f = build_assignment([lat([(2.0, 2.0), (0, 0)], vis=[True, False])], (2, 5, 5), GroundingParams())
    assert (f.owner[1] == GLOBAL).all()
    assert (f.owner[0] == 0).any()


def test_contested_cell_goes_to_larger_weight():
    trajs = [lat([(2.0, 2.0)]), lat([(2.0, 3.0)])]
    f = build_assignment(trajs, (1, 6, 6), GroundingParams(sigma=1, radius=2))
    # cell (col=2, row=2)
    assert f.owner[0, 2, 2] == 0
    assert f.weight[0, 2, 2] == 1.0
    assert f.owner[0, 3, 2] == 1


def test_tie_goes_to_lower_index():
    trajs = [lat([(1.0, 2.0)]), lat([(3.0, 2.0)])]
    f = build_assignment(trajs, (1, 5, 5), GroundingParams(sigma=1, radius=2))
    assert f.owner[0, 2, 2] == 0


def test_gaussian_disabled_weights_are_one():
    f = build_assignment([lat([(2.3, 2.6)])], (1, 6, 6),
                         GroundingParams(gaussian_enabled=False))
    assert set(np.unique(f.weight[f.owner == 0])) == {1.0}


def test_point_only_claims_single_cell():
    f = build_assignment([lat([(2.4, 3.6), (7.9, 0.2)])], (2, 8, 8), GroundingParams.point_only())
    assert (f.owner == 0).sum() == 2
    assert f.owner[0, 4, 2] == 0 and f.owner[1, 0, 7] == 0


def test_rejects_out_of_grid():
    with pytest.raises(ValueError):
        build_assignment([lat([(8.0, 1.0)])], (1, 8, 8), GroundingParams())
    with pytest.raises(ValueError):
        build_assignment([lat([(1.0, 1.0)] * 2)], (3, 8, 8), GroundingParams())


@st.composite
def instances(draw):
    T = draw(st.integers(1, 4))
    H = draw(st.integers(1, 8))
    W = draw(st.integers(1, 8))
    n = draw(st.integers(0, 3))
    trajs = []
    for _ in range(n):
        pts, vis = [], []
        for _ in range(T):
            pts.append((draw(st.floats(0, W, exclude_max=True)), draw(st.floats(0, H, exclude_max=True))))
            vis.append(draw(st.booleans()))
        trajs.append(lat(pts, vis))
    params = GroundingParams(sigma=draw(st.floats(0.3, 3)), radius=draw(st.floats(0, 4)),
                             gaussian_enabled=draw(st.booleans()),
                             neighborhood_enabled=draw(st.booleans()))
    return trajs, (T, H, W), params


@settings(max_examples=200, deadline=None)
@given(instances())
def test_matches_brute_force(inst):
    trajs, grid, params = inst
    f = build_assignment(trajs, grid, params)
    owner, weight = brute_force_field(trajs, grid, params)
    assert np.array_equal(f.owner, owner)
    assert np.allclose(f.weight, weight, rtol=1e-12, atol=0)
    assert ((f.weight > 0) & (f.weight <= 1)).all()


@settings(max_examples=100, deadline=None)
@given(instances(), st.floats(0, 3))
def test_growing_radius_never_unassigns(inst, extra):
    trajs, grid, params = inst
    if not params.neighborhood_enabled:
        return
    small = build_assignment(trajs, grid, params)
    big = build_assignment(trajs, grid, GroundingParams(params.sigma, params.radius + extra,
                                                        params.gaussian_enabled, True))
    assert ((small.owner == GLOBAL) | (big.owner != GLOBAL)).all()


def test_point_only_dense_tracks_claim_one_cell_per_visible_step():
    rng = np.random.default_rng(3)
    grid = (4, 8, 8)
    cells = rng.permutation(64)[:6]
    trajs = []
    for c in cells:
        row, col = divmod(int(c), 8)
        vis = rng.random(4) < 0.7
        vis[0] = True
        trajs.append(lat([(col + 0.2, row - 0.3 if row else row)] * 4, vis))
    f = build_assignment(trajs, grid, GroundingParams.point_only())
    for k, tr in enumerate(trajs):
        for t in range(4):
            assert (f.owner[t] == k).sum() == int(tr.visible[t])


def test_conditioning_sources():
    g = np.full((3, 4), 7.0)
    f = AssignmentField.all_global((1, 2, 2))
    sm = conditioning_sources(f, [], g)
    assert all(np.array_equal(sm.feature_at(0, r, c), g) for r in range(2) for c in range(2))

    owner = np.array([[[0, GLOBAL], [GLOBAL, 0]]])
    weight = np.array([[[0.5, 1.0], [1.0, 1.0]]])
    f = AssignmentField(owner, weight)
    loc = LocalText("m0", "red circle", np.ones((1, 4)))
    sm = conditioning_sources(f, [loc], g)
    assert np.array_equal(sm.feature_at(0, 0, 0), np.full((1, 4), 0.5))
    assert np.array_equal(sm.feature_at(0, 1, 1), np.ones((1, 4)))
    assert np.array_equal(sm.feature_at(0, 0, 1), g)

    with pytest.raises(ValueError):
        conditioning_sources(f, [LocalText("m0", "red circle")], g)
