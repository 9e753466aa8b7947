"""End-to-end toy experiments: blob world, two-stage training, guided sampling, metrics."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotation import DatasetRecord
from .dit import (AdamW, ConditionBundle, DiT, Example, LocalCondition, ModelConfig, TrainHyper,
                  save_checkpoint, train_step)
from .grounding import GroundingParams, build_assignment
from .guidance import GuidanceSpec, SamplerConfig, Scheme, sample
from .metrics import DEFAULT_TAUS, TrackPair, epe, local_alignment
from .text import HashEmbedder
from .trajectory import Trajectory, VideoDims, to_latent
from .world import BlobWorldConfig, ColorEmbedder, WorldSample, blob_centroid_tracker, generate_world

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


@dataclass(frozen=True)
class StageConfig:
    steps: int = 400
    batch_size: int = 16
    lr: float = 1e-3
    tracks: str = "sparse"
    max_tracks: int = 5
    grounding: GroundingParams = GroundingParams()

    def __post_init__(self):
        if self.tracks not in ("dense", "sparse"):
            raise ValueError("tracks must be 'dense' or 'sparse'")


def _stage1_default():
    return StageConfig(steps=600, tracks="dense", max_tracks=40, grounding=GroundingParams.point_only())


@dataclass(frozen=True)
class EvalConfig:
    test_samples: int = 50
    batch_size: int = 25
    taus: tuple[float, ...] = DEFAULT_TAUS
    tracker_threshold: float = 0.25
    grid_prompts: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    world: BlobWorldConfig = BlobWorldConfig()
    model: ModelConfig = ModelConfig()
    stage1: StageConfig = field(default_factory=_stage1_default)
    stage2: StageConfig = StageConfig()
    guidance: GuidanceSpec = GuidanceSpec()
    sampler: SamplerConfig = SamplerConfig()
    eval: EvalConfig = EvalConfig()
    train_samples: int = 2000
    trainable: str = "all"
    weight_decay: float = 0.01
    grad_clip: float = 10.0
    p_drop_glob: float = 0.8
    p_drop_loc: float = 0.1
    ablation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.stage2.max_tracks > self.stage1.max_tracks:
            raise ValueError("stage-2 track cap must not exceed the stage-1 track count")
        w, m = self.world, self.model
        if (w.frames, w.height, w.width, w.channels) != m.volume:
            raise ValueError(f"world volume {(w.frames, w.height, w.width, w.channels)} "
                             f"does not match model volume {m.volume}")
        if m.patch[1] != m.patch[2]:
            raise ValueError("spatial patch must be square")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["guidance"]["scheme"] = self.guidance.scheme.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)

        def stage(s, default):
            s = dict(s)
            if "grounding" in s:
                s["grounding"] = GroundingParams(**s["grounding"])
            return dataclasses.replace(default, **s)

        kw = {}
        if "world" in d:
            kw["world"] = BlobWorldConfig(**d.pop("world"))
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d.pop("model"))
        if "stage1" in d:
            kw["stage1"] = stage(d.pop("stage1"), _stage1_default())
        if "stage2" in d:
            kw["stage2"] = stage(d.pop("stage2"), StageConfig())
        if "guidance" in d:
            kw["guidance"] = GuidanceSpec(**d.pop("guidance"))
        if "sampler" in d:
            kw["sampler"] = SamplerConfig(**d.pop("sampler"))
        if "eval" in d:
            e = dict(d.pop("eval"))
            if "taus" in e:
                e["taus"] = tuple(e["taus"])
            kw["eval"] = EvalConfig(**e)
        kw.update(d)
        return cls(**kw)

    def hyper(self, stage: StageConfig) -> TrainHyper:
        return TrainHyper(lr=stage.lr, weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                          p_drop_glob=self.p_drop_glob, p_drop_loc=self.p_drop_loc,
                          trainable=self.trainable)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- encoding


def model_dims(cfg: ModelConfig) -> VideoDims:
    pt, ph, _ = cfg.patch
    return VideoDims(cfg.frames, cfg.height, cfg.width, *cfg.token_grid,
                     spatial_scale=ph, temporal_scale=pt)


def encode_condition(record: DatasetRecord, cfg: ModelConfig, grounding: GroundingParams,
                     embedder: HashEmbedder, max_tracks: int | None = None) -> ConditionBundle:
    dims = model_dims(cfg)
    pairs = record.trajectories if max_tracks is None else record.trajectories[:max_tracks]
    glob = embedder(record.global_caption)
    if not pairs:
        return ConditionBundle(glob, None)
    lats = [to_latent(traj, dims) for traj, _ in pairs]
    fld = build_assignment(lats, cfg.token_grid, grounding)
    texts = tuple(lt.with_feature(embedder(lt.text)) for _, lt in pairs)
    return ConditionBundle(glob, LocalCondition(texts, fld))


def encode_examples(samples: Sequence[WorldSample], cfg: ModelConfig, stage: StageConfig,
                    embedder: HashEmbedder) -> list[Example]:
    out = []
    for s in samples:
        rec = s.dense_record if stage.tracks == "dense" else s.record
        out.append(Example(s.latent, encode_condition(rec, cfg, stage.grounding, embedder,
                                                      stage.max_tracks)))
    return out


# ---------------------------------------------------------------- training


def train(model: DiT, examples: Sequence[Example], stage: StageConfig, hyper: TrainHyper,
          seed: int, opt: AdamW | None = None, log_every: int = 100) -> list[float]:
    """Run ``stage.steps`` updates over shuffled mini-batches; returns the loss curve."""
    rng = np.random.default_rng(seed)
    opt = opt or AdamW(lr=stage.lr, weight_decay=hyper.weight_decay)
    losses = []
    order = rng.permutation(len(examples))
    pos = 0
    for step in range(stage.steps):
        if pos + stage.batch_size > len(order):
            order = rng.permutation(len(examples))
            pos = 0
        batch = [examples[i] for i in order[pos:pos + stage.batch_size]]
        pos += stage.batch_size
        info = train_step(model, batch, opt, hyper, rng)
        losses.append(info["loss"])
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.4f (mean of last %d: %.4f)", step + 1, info["loss"],
                     log_every, float(np.mean(losses[-log_every:])))
    return losses


# ---------------------------------------------------------------- evaluation


def generate(model: DiT, conds: Sequence[ConditionBundle], g: GuidanceSpec, sc: SamplerConfig,
             batch_size: int = 25) -> np.ndarray:
    out = []
    for i in range(0, len(conds), batch_size):
        out.append(sample(model, conds[i:i + batch_size], g, sc, first_index=i))
    return np.concatenate(out)


def score_videos(videos: np.ndarray, records: Sequence[DatasetRecord], taus=DEFAULT_TAUS,
                 threshold: float = 0.25) -> list[dict]:
    """Per-video EPE (mean over tracks) and local alignment against condition tracks."""
    emb = ColorEmbedder(threshold=threshold)
    rows = []
    for vid, rec in zip(videos, records):
        trajs = [tr for tr, _ in rec.trajectories]
        seeds = [tuple(tr.xy[int(np.argmax(tr.visible))]) for tr in trajs]
        est = blob_centroid_tracker(vid, seeds, threshold)
        # the tracker starts from the first visible condition point
        errs = []
        for tr, e in zip(trajs, est):
            first = int(np.argmax(tr.visible))
            xy = e.xy.copy()
            xy[:first] = xy[first]
            errs.append(epe(TrackPair(tr, Trajectory.from_arrays(xy, e.visible, e.local_text_id))))
        align = [local_alignment(vid, tr, lt.text, emb, taus) for tr, lt in rec.trajectories]
        rows.append({"epe": float(np.mean(errs)), "local_alignment": float(np.mean(align)),
                     "tracks": len(trajs)})
    return rows


def evaluate(model: DiT, test: Sequence[WorldSample], grounding: GroundingParams,
             g: GuidanceSpec, sc: SamplerConfig, ec: EvalConfig, embedder: HashEmbedder,
             name: str, max_tracks: int = 5) -> tuple[dict, np.ndarray]:
    recs = [s.record for s in test]
    conds = [encode_condition(r, model.cfg, grounding, embedder, max_tracks) for r in recs]
    vids = generate(model, conds, g, sc, ec.batch_size)
    per = score_videos(vids, [_truncate(r, max_tracks) for r in recs], ec.taus, ec.tracker_threshold)
    row = {
        "name": name,
        "scheme": g.scheme.value,
        "s_glob": g.s_glob, "s_loc": g.s_loc, "s": g.s,
        "lam": model.cfg.lam,
        "epe": float(np.mean([r["epe"] for r in per])),
        "local_alignment": float(np.mean([r["local_alignment"] for r in per])),
        "videos": len(per),
        "tracks": int(sum(r["tracks"] for r in per)),
        "per_video_epe": [r["epe"] for r in per],
    }
    return row, vids


def _truncate(rec: DatasetRecord, max_tracks: int) -> DatasetRecord:
    return dataclasses.replace(rec, trajectories=rec.trajectories[:max_tracks])


# ---------------------------------------------------------------- orchestration


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-tagged with the stage name
                raise StageError(name, exc) from exc
        return inner
    return wrap


@dataclass
class ExperimentResult:
    report: dict
    model: DiT
    videos: dict[str, np.ndarray]
    timings: dict[str, float]


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Generate data, train both stages, sample with and without trajectories, score.

    With ``cfg.ablation`` the dense-only and sparse-without-Gaussian variants
    are trained from the same stage-1 weights and reported alongside.
    """
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(key):
        nonlocal clock
        now = time.perf_counter()
        timings[key] = now - clock
        clock = now

    embedder = HashEmbedder(cfg.model.dim)
    train_set = _stage("world")(generate_world)(cfg.world, cfg.train_samples, 0)
    test_set = _stage("world")(generate_world)(cfg.world, cfg.eval.test_samples, 10 ** 6)
    lap("world")

    model = _stage("init")(DiT.create)(cfg.model, seed=cfg.seed)
    ex1 = _stage("encode")(encode_examples)(train_set, cfg.model, cfg.stage1, embedder)
    curve1 = _stage("train-stage1")(train)(model, ex1, cfg.stage1, cfg.hyper(cfg.stage1), cfg.seed + 1)
    lap("stage1")

    rows = []
    videos = {}
    eval_ = _stage("evaluate")(evaluate)
    train_ = _stage("train-stage2")(train)
    if cfg.ablation:
        row, vids = eval_(model, test_set, cfg.stage1.grounding, cfg.guidance, cfg.sampler,
                          cfg.eval, embedder, "ablation/dense", cfg.stage2.max_tracks)
        rows.append(row)
        videos[row["name"]] = vids
        sparse_plain = dataclasses.replace(cfg.stage2, grounding=GroundingParams.point_only())
        m2 = DiT(cfg.model, copy.deepcopy(model.params))
        ex2 = _stage("encode")(encode_examples)(train_set, cfg.model, sparse_plain, embedder)
        train_(m2, ex2, sparse_plain, cfg.hyper(sparse_plain), cfg.seed + 2)
        row, vids = eval_(m2, test_set, sparse_plain.grounding, cfg.guidance, cfg.sampler,
                          cfg.eval, embedder, "ablation/sparse", cfg.stage2.max_tracks)
        rows.append(row)
        videos[row["name"]] = vids
        lap("ablation")

    ex2 = _stage("encode")(encode_examples)(train_set, cfg.model, cfg.stage2, embedder)
    curve2 = train_(model, ex2, cfg.stage2, cfg.hyper(cfg.stage2), cfg.seed + 2)
    lap("stage2")

    uncond = dataclasses.replace(cfg.guidance, scheme=Scheme.NONE)
    for name, g in (("unconditioned", uncond), ("guided", cfg.guidance)):
        row, vids = eval_(model, test_set, cfg.stage2.grounding, g, cfg.sampler, cfg.eval,
                          embedder, name, cfg.stage2.max_tracks)
        rows.append(row)
        videos[name] = vids
    if cfg.ablation:
        rows.append(dict(rows[-1], name="ablation/gaussian"))
    lap("evaluate")

    report = {
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "base_model_equivalent": cfg.model.lam == 0.0,
        "train": {
            "stage1_steps": cfg.stage1.steps, "stage2_steps": cfg.stage2.steps,
            "stage1_loss_first": curve1[0] if curve1 else None,
            "stage1_loss_last50": float(np.mean(curve1[-50:])) if curve1 else None,
            "stage2_loss_last50": float(np.mean(curve2[-50:])) if curve2 else None,
            "train_samples": cfg.train_samples,
        },
        "rows": rows,
    }
    if out_dir is not None:
        _stage("write")(write_outputs)(Path(out_dir), cfg, report, model, videos, test_set)
        lap("write")
    return ExperimentResult(report, model, videos, timings)


def format_table(report: dict) -> str:
    lines = [f"{'run':<22}{'scheme':<15}{'lambda':>7}{'EPE':>10}{'local':>10}{'videos':>8}"]
    for r in report["rows"]:
        lines.append(f"{r['name']:<22}{r['scheme']:<15}{r['lam']:>7.2f}{r['epe']:>10.4f}"
                     f"{r['local_alignment']:>10.4f}{r['videos']:>8d}")
    if report.get("base_model_equivalent"):
        lines.append("note: lambda = 0, LACA is inactive; outputs equal the base text-to-video model")
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(format_table(report))


def write_outputs(out_dir: Path, cfg: ExperimentConfig, report: dict, model: DiT,
                  videos: dict[str, np.ndarray], test_set: Sequence[WorldSample]) -> None:
    from .render import save_frame_grid

    out_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, out_dir)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(out_dir / "checkpoint.npz", model, {"fingerprint": cfg.fingerprint()})
    k = cfg.eval.grid_prompts
    save_frame_grid(out_dir / "frames_truth.png", np.stack([s.latent for s in test_set[:k]]))
    for name, vids in videos.items():
        save_frame_grid(out_dir / f"frames_{name.replace('/', '_')}.png", vids[:k])
