import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundtraj.annotation import (DatasetRecord, EntityMask, RecordError, TrackOutcome,
                                   annotate_scene, build_record, grid_shape, parse, point_nms,
                                   read_dataset, record_from_dict, representative_points,
                                   serialize, track, write_dataset)
from groundtraj.trajectory import LocalText, Trajectory, VideoDims
from groundtraj.world import (BlobWorldConfig, OracleLabeler, OracleTracker, generate_world,
                              scene_masks)


# -- point NMS


def test_nms_examples():
    rng = np.random.default_rng(0)
    assert len(point_nms([(0, 0), (10, 0)], 32, rng)) == 1
    assert len(point_nms([(0, 0), (50, 0)], 32, rng)) == 2
    pts = [tuple(p) for p in np.random.default_rng(1).uniform(0, 100, (100, 2))]
    assert point_nms(pts, 0, rng) == pts
    with pytest.raises(ValueError):
        point_nms(pts, -1, rng)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 40), st.floats(0, 30))
def test_nms_separated_maximal_deterministic(seed, n, radius):
    pts = [tuple(p) for p in np.random.default_rng(seed).uniform(0, 100, (n, 2))]
    kept = point_nms(pts, radius, np.random.default_rng(seed))
    assert kept == point_nms(pts, radius, np.random.default_rng(seed))
    k = np.array(kept).reshape(-1, 2)
    for i in range(len(k)):
        for j in range(i + 1, len(k)):
            assert math.dist(k[i], k[j]) > radius
    for p in pts:
        assert p in kept or any(math.dist(p, q) <= radius for q in kept)


# -- representative points


def test_small_entity_single_bbox_center():
    m = np.zeros((100, 100), bool)
    m[10:12, 20:25] = True  # 10 px < 100
    assert representative_points(m, 0.01) == [(22.5, 11.0)]


def test_full_frame_grid():
    pts = representative_points(np.ones((100, 100), bool), 0.01)
    assert len(pts) >= 100
    assert all(0 <= x <= 100 and 0 <= y <= 100 for x, y in pts)


def test_exact_threshold_takes_grid_path():
    m = np.zeros((100, 100), bool)
    m[50, :] = True  # exactly 100 px in one row
    assert len(representative_points(m, 0.01)) == 10
    m[50, 0] = False
    assert representative_points(m, 0.01) == [(50.5, 50.5)]


def test_grid_cells_respect_pixel_cap():
    # 50-px threshold: a sqrt-ceiling side of 8 would allow 64-px cells
    rows, cols = grid_shape(40, 40, 50.0)
    assert math.ceil(40 / rows) * math.ceil(40 / cols) <= 50


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.005, 0.01, 0.03, 0.1]))
def test_representative_points_properties(seed, frac):
    rng = np.random.default_rng(seed)
    H, W = int(rng.integers(8, 60)), int(rng.integers(8, 60))
    m = rng.random((H, W)) < rng.uniform(0.05, 0.9)
    if not m.any():
        m[0, 0] = True
    ys, xs = np.nonzero(m)
    pts = representative_points(m, frac)
    assert pts
    for x, y in pts:
        assert xs.min() <= x <= xs.max() + 1 and ys.min() <= y <= ys.max() + 1
    if m.sum() < frac * H * W:
        assert len(pts) == 1
    else:
        bh, bw = ys.max() - ys.min() + 1, xs.max() - xs.min() + 1
        nr, nc = grid_shape(bh, bw, frac * H * W)
        assert math.ceil(bh / nr) * math.ceil(bw / nc) <= max(frac * H * W, 1)


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        representative_points(np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        EntityMask(0, np.zeros((4, 4), bool), "e")


# -- tracking


class ShiftTracker:
    def __init__(self, step, exit_at=None):
        self.step, self.exit_at = step, exit_at

    def track_point(self, frames, seed):
        T = frames.shape[0]
        xy = np.asarray(seed) + np.arange(T)[:, None] * np.asarray(self.step)
        vis = np.ones(T, bool)
        if self.exit_at is not None:
            vis[self.exit_at:] = False
        return xy, vis


class FailingTracker:
    def track_point(self, frames, seed):
        if seed[0] > 5:
            raise RuntimeError("lost")
        return np.tile(seed, (frames.shape[0], 1)), np.ones(frames.shape[0], bool)


def test_translating_seed():
    frames = np.zeros((6, 32, 32, 1))
    (out,) = track(ShiftTracker((1, 1)), frames, [(4.0, 4.0)])
    assert np.array_equal(out.trajectory.xy, 4 + np.arange(6)[:, None] * np.ones(2))
    assert out.trajectory.visible.all()


def test_exit_and_static():
    frames = np.zeros((8, 32, 32, 1))
    (out,) = track(ShiftTracker((1, 0), exit_at=5), frames, [(2.0, 2.0)])
    assert out.trajectory.visible.tolist() == [True] * 5 + [False] * 3
    (st_,) = track(ShiftTracker((0, 0)), frames, [(7.0, 3.0)])
    assert (st_.trajectory.xy == [7.0, 3.0]).all()


def test_positions_leaving_frame_are_invisible():
    frames = np.zeros((5, 8, 8, 1))
    (out,) = track(ShiftTracker((3, 0)), frames, [(1.0, 1.0)])
    assert out.trajectory.visible.tolist() == [True, True, True, False, False]


def test_failures_are_per_point():
    frames = np.zeros((3, 16, 16, 1))
    outs = track(FailingTracker(), frames, [(1.0, 1.0), (9.0, 1.0), (20.0, 1.0)])
    assert [o.ok for o in outs] == [True, False, False]
    rec = build_record("c", outs, ["a", "b", "c"], VideoDims.from_scales(3, 16, 16))
    assert len(rec.trajectories) == 1 and len(rec.meta["skipped_tracks"]) == 2


def test_empty_and_invalid_records():
    dims = VideoDims.from_scales(3, 16, 16)
    assert build_record("only a caption", [], [], dims).trajectories == ()
    bad = Trajectory(((1.0, 1.0, True), (99.0, 1.0, True), (1.0, 1.0, True)), "m0")
    with pytest.raises(RecordError) as exc:
        build_record("c", [TrackOutcome((1.0, 1.0), bad)], ["x"], dims)
    assert exc.value.report.violations[0].frame == 1
    with pytest.raises(ValueError):
        build_record("c", [], ["x"], dims)


def test_annotate_blob_scene_with_oracles():
    cfg = BlobWorldConfig(frames=6, height=32, width=32, min_blobs=2, max_blobs=2, seed=4)
    (s,) = generate_world(cfg, 1)
    masks = scene_masks(s, cfg)
    rec = annotate_scene(s.latent, masks, s.record.global_caption, OracleTracker(s),
                         OracleLabeler(s), np.random.default_rng(0), threshold_frac=0.05,
                         nms_radius=1.0)
    assert not rec.validate()
    phrases = {b.phrase for b in s.blobs}
    assert rec.trajectories and {lt.text for lt in rec.local_texts} <= phrases


# -- serialization


@st.composite
def records(draw):
    T = draw(st.integers(1, 6))
    H = draw(st.integers(4, 64))
    W = draw(st.integers(4, 64))
    n = draw(st.integers(0, 4))
    pairs = []
    for k in range(n):
        pts = [(draw(st.floats(0, W, exclude_max=True)), draw(st.floats(0, H, exclude_max=True)),
                draw(st.booleans())) for _ in range(T)]
        pts[0] = (pts[0][0], pts[0][1], True)
        pairs.append((Trajectory(tuple(pts), f"m{k}"),
                      LocalText(f"m{k}", draw(st.text(min_size=0, max_size=12)))))
    caption = draw(st.text(max_size=30))
    meta = draw(st.dictionaries(st.sampled_from(["source", "split"]), st.text(max_size=5), max_size=2))
    return DatasetRecord(caption, tuple(pairs), VideoDims.from_scales(T, H, W), meta)


@settings(max_examples=300, deadline=None)
@given(records())
def test_round_trip(rec):
    line = serialize(rec)
    assert "\n" not in line
    back = parse(line)
    assert back == rec
    assert serialize(back) == line


def test_dataset_file_round_trip(tmp_path):
    cfg = BlobWorldConfig(seed=2)
    recs = [s.record for s in generate_world(cfg, 5)]
    assert write_dataset(tmp_path / "d.jsonl", recs) == 5
    assert read_dataset(tmp_path / "d.jsonl") == recs


def test_parse_rejects_bad_version_and_bounds():
    rec = generate_world(BlobWorldConfig(), 1)[0].record
    d = json.loads(serialize(rec))
    with pytest.raises(ValueError):
        record_from_dict({**d, "version": 99})
    d["tracks"][0]["pts"][0][0] = 1e6
    with pytest.raises(RecordError):
        parse(json.dumps(d))
