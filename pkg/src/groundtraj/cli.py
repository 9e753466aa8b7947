"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime failure.
Relative output paths resolve under ``$GROUNDTRAJ_OUT`` (default: cwd).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .annotation import (DatasetRecord, EntityMask, RecordError, annotate_scene, read_dataset,
                         write_dataset)
from .experiment import (EvalConfig, ExperimentConfig, StageError, encode_condition,
                         encode_examples, format_table, generate, run_experiment, score_videos,
                         train, write_report)
from .dit import AdamW, DiT, load_checkpoint, save_checkpoint
from .guidance import GuidanceSpec, SamplerConfig, Scheme
from .render import save_frame_grid
from .text import HashEmbedder
from .trajectory import TrajectoryError
from .world import CentroidTracker, PaletteLabeler, WorldSample, generate_world, scene_masks

OUT_ENV = "GROUNDTRAJ_OUT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("groundtraj")


class CheckFailed(Exception):
    """A numerical check ran to completion but did not pass."""


def out_path(p: str | Path) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUT_ENV, ".")) / p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, pairs: list[str]) -> dict:
    """``a.b.c=value`` assignments into a nested dict; values parse as JSON when they can."""
    for item in pairs:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not of the form key=value")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_value(val)
    return d


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    d = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ValueError("config file must hold a JSON object")
    try:
        return ExperimentConfig.from_dict(apply_overrides(d, overrides or []))
    except TypeError as exc:  # unknown field names
        raise ValueError(f"bad config: {exc}") from exc


# ---------------------------------------------------------------- dataset directories


def save_world(out: Path, samples: list[WorldSample], scenes: bool, cfg) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "dataset.jsonl", [s.record for s in samples])
    write_dataset(out / "dataset_dense.jsonl", [s.dense_record for s in samples])
    np.save(out / "latents.npy", np.stack([s.latent for s in samples]))
    if scenes:
        for i, s in enumerate(samples):
            d = out / "scenes" / f"{i:05d}"
            d.mkdir(parents=True, exist_ok=True)
            np.save(d / "frames.npy", s.latent)
            np.savez(d / "masks.npz", **{m.entity_id: m.mask for m in scene_masks(s, cfg)})
            (d / "caption.txt").write_text(s.record.global_caption + "\n", encoding="utf-8")


def load_world(data: Path) -> list[WorldSample]:
    recs = read_dataset(data / "dataset.jsonl")
    dense_path = data / "dataset_dense.jsonl"
    dense = read_dataset(dense_path) if dense_path.exists() else recs
    lat = np.load(data / "latents.npy")
    if not len(recs) == len(dense) == len(lat):
        raise ValueError(f"{data}: dataset files disagree on sample count")
    return [WorldSample(lat[i].astype(np.float32), recs[i], dense[i], ()) for i in range(len(recs))]


def _samples(args, cfg: ExperimentConfig, count: int, offset: int) -> list[WorldSample]:
    if getattr(args, "data", None):
        return load_world(Path(args.data))
    return generate_world(cfg.world, count, offset)


# ---------------------------------------------------------------- commands


def cmd_generate_world(args) -> int:
    cfg = load_config(args.config, args.set)
    samples = generate_world(cfg.world, args.count, args.offset)
    out = out_path(args.out)
    save_world(out, samples, args.scenes, cfg.world)
    print(f"wrote {len(samples)} scenes to {out}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    root = Path(args.scenes)
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ValueError(f"no scene directories under {root}")
    rng = np.random.default_rng(args.seed)
    tracker, labeler = CentroidTracker(args.tracker_threshold), PaletteLabeler()
    records: list[DatasetRecord] = []
    for d in dirs:
        frames = np.load(d / "frames.npy")
        with np.load(d / "masks.npz") as z:
            masks = [EntityMask(0, z[k], k) for k in sorted(z.files)]
        cap_file = d / "caption.txt"
        caption = cap_file.read_text(encoding="utf-8").strip() if cap_file.exists() else ""
        records.append(annotate_scene(frames, masks, caption, tracker, labeler, rng,
                                      args.threshold_frac, args.nms_radius, {"scene": d.name}))
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, records)
    print(f"annotated {len(records)} scenes -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    samples = _samples(args, cfg, cfg.train_samples, 0)
    emb = HashEmbedder(cfg.model.dim)
    model = DiT.create(cfg.model, seed=cfg.seed)
    curves = {}
    for name, stage, seed in (("stage1", cfg.stage1, cfg.seed + 1), ("stage2", cfg.stage2, cfg.seed + 2)):
        if stage.steps == 0:
            continue
        ex = encode_examples(samples, cfg.model, stage, emb)
        curves[name] = train(model, ex, stage, cfg.hyper(stage), seed,
                             AdamW(lr=stage.lr, weight_decay=cfg.weight_decay))
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", model, {"fingerprint": cfg.fingerprint()})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "losses.json").write_text(json.dumps(curves) + "\n")
    print(f"checkpoint -> {out / 'checkpoint.npz'}")
    return EXIT_OK


def _guidance(args, cfg: ExperimentConfig) -> GuidanceSpec:
    g = cfg.guidance
    if args.scheme:
        g = dataclasses.replace(g, scheme=Scheme(args.scheme))
    return g


def cmd_sample(args) -> int:
    cfg = load_config(args.config, args.set)
    model, _ = load_checkpoint(args.checkpoint)
    if model.cfg != cfg.model:
        cfg = dataclasses.replace(cfg, model=model.cfg)
    samples = _samples(args, cfg, args.count, args.offset)[:args.count]
    emb = HashEmbedder(model.cfg.dim)
    conds = [encode_condition(s.record, model.cfg, cfg.stage2.grounding, emb, cfg.stage2.max_tracks)
             for s in samples]
    vids = generate(model, conds, _guidance(args, cfg), cfg.sampler, cfg.eval.batch_size)
    out = out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "videos.npy", vids)
    write_dataset(out / "prompts.jsonl", [s.record for s in samples])
    save_frame_grid(out / "frames.png", vids[:cfg.eval.grid_prompts])
    print(f"{len(vids)} videos -> {out / 'videos.npy'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    vids = np.load(args.videos)
    recs = read_dataset(args.prompts)
    if len(vids) != len(recs):
        raise ValueError(f"{len(vids)} videos but {len(recs)} prompts")
    ec = EvalConfig()
    rows = score_videos(vids, [dataclasses.replace(r, trajectories=r.trajectories[:args.max_tracks])
                               for r in recs], ec.taus, args.tracker_threshold)
    report = {
        "videos": rows,
        "aggregate": {
            "epe": float(np.mean([r["epe"] for r in rows])),
            "local_alignment": float(np.mean([r["local_alignment"] for r in rows])),
            "count": len(rows),
        },
    }
    out = out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    agg = report["aggregate"]
    print(f"EPE {agg['epe']:.4f}  local alignment {agg['local_alignment']:.4f}  ({agg['count']} videos)")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = load_config(args.config, args.set)
    out = out_path(args.out)
    res = run_experiment(cfg, out)
    print(format_table(res.report), end="")
    print(f"report -> {out / 'report.json'}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .attention import grad_check
    from .dit import ConditionBundle, LocalCondition, ModelConfig, loss_and_grads
    from .grounding import GroundingParams, build_assignment
    from .trajectory import LatentTrajectory, LocalText

    cfg = ModelConfig(depth=args.depth, dim=4, heads=2, patch=(1, 1, 1), channels=1, frames=1,
                      height=2, width=2, time_dim=4, mlp_ratio=2, lam=args.lam)
    rng = np.random.default_rng(args.seed)
    model = DiT.create(cfg, seed=args.seed, zero_init=False, dtype=np.float64)
    tr = LatentTrajectory(np.array([[0.3, 0.8]]), np.array([True]), "m0")
    fld = build_assignment([tr], cfg.token_grid, GroundingParams(sigma=1.0, radius=1.0))
    loc = LocalText("m0", "red circle", rng.standard_normal((2, cfg.dim)))
    cond = ConditionBundle(rng.standard_normal((3, cfg.dim)), LocalCondition((loc,), fld))
    x1 = rng.standard_normal((2,) + cfg.volume)
    x0 = rng.standard_normal(x1.shape)
    t = rng.random(2)
    err = grad_check(lambda: loss_and_grads(model, x1, x0, t, [cond, cond.without_global()]),
                     model.params, eps=args.eps)
    ok = err < args.tol
    print(f"max relative error {err:.3e} (tolerance {args.tol:g}): {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CheckFailed(f"gradient check error {err:.3e} >= {args.tol:g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groundtraj", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. stage2.steps=50 (repeatable)")
        return p

    p = with_config(sub.add_parser("generate-world", help="render a blob-world dataset"))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--scenes", action="store_true", help="also write per-scene frame/mask dirs")
    p.add_argument("--out", default="world")
    p.set_defaults(fn=cmd_generate_world)

    p = sub.add_parser("annotate", help="scene directories -> trajectory-text dataset")
    p.add_argument("--scenes", required=True, help="dir of scene dirs (frames.npy, masks.npz)")
    p.add_argument("--out", default="annotated.jsonl")
    p.add_argument("--threshold-frac", type=float, default=0.01)
    p.add_argument("--nms-radius", type=float, default=0.0)
    p.add_argument("--tracker-threshold", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_annotate)

    p = with_config(sub.add_parser("train", help="two-stage training to a checkpoint"))
    p.add_argument("--data", help="directory written by generate-world (default: generate)")
    p.add_argument("--out", default="train")
    p.set_defaults(fn=cmd_train)

    p = with_config(sub.add_parser("sample", help="generate videos from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory written by generate-world (prompts)")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--offset", type=int, default=10 ** 6, help="first generated test scene")
    p.add_argument("--scheme", choices=[s.value for s in Scheme])
    p.add_argument("--out", default="samples")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="EPE and local alignment of sampled videos")
    p.add_argument("--videos", required=True)
    p.add_argument("--prompts", required=True, help="dataset file the videos were sampled from")
    p.add_argument("--max-tracks", type=int, default=5)
    p.add_argument("--tracker-threshold", type=float, default=0.25)
    p.add_argument("--out", default="metrics.json")
    p.set_defaults(fn=cmd_evaluate)

    p = with_config(sub.add_parser("run-experiment", help="data, training, sampling and metrics"))
    p.add_argument("--out", default="experiment")
    p.set_defaults(fn=cmd_run_experiment)

    p = sub.add_parser("grad-check", help="finite-difference check of the full model gradient")
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_grad_check)
    return ap


INVALID = (ValueError, TrajectoryError, RecordError, KeyError, FileNotFoundError, CheckFailed)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
