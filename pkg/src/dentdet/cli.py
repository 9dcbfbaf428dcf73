"""Command line entry point.

Subcommands: datagen, train, pipeline, infer, eval, render, validate.
Exit codes: 0 success, 2 bad arguments or config, 3 missing files,
4 invalid data, 5 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import ENV_CONFIG, RunConfig, load_config
from .data import (
    AnnotationError,
    generate_dataset,
    level_tag,
    load_annotations,
    split_manifest,
)
from .diffusion import Schedule
from .imageio import read_pgm, write_ppm
from .labels import HierarchyLevel, mask_for
from .manipulate import InferredBoxCache
from .model import load_checkpoint, save_checkpoint
from .train import (
    ARMS,
    StageConfig,
    TrainingDiverged,
    evaluate_params,
    infer,
    make_plan,
    prepare_samples,
    run_pipeline,
    train_stage,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_DIVERGED = 5

_LEVELS = {
    "a": HierarchyLevel.QUADRANT_ONLY,
    "b": HierarchyLevel.QUADRANT_ENUM,
    "c": HierarchyLevel.FULL,
    "quadrant": HierarchyLevel.QUADRANT_ONLY,
    "quadrant_enumeration": HierarchyLevel.QUADRANT_ENUM,
    "quadrant_enumeration_diagnosis": HierarchyLevel.FULL,
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _level(arg: str) -> HierarchyLevel:
    try:
        return _LEVELS[arg]
    except KeyError:
        raise CliError(EXIT_USAGE, f"unknown level {arg!r}")


def _load_level(data_dir: Path, level: HierarchyLevel):
    path = data_dir / f"annotations_{level_tag(level)}.json"
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing annotation file: {path}")
    try:
        return load_annotations(path, level)
    except AnnotationError as e:
        raise CliError(EXIT_INVALID, str(e))


def _stage_config(cfg: RunConfig, level: HierarchyLevel, args) -> StageConfig:
    return StageConfig(
        level=level,
        iterations=args.iterations or cfg.train.iterations,
        batch_size=args.batch_size or cfg.train.batch_size,
        lr=args.lr or cfg.train.lr,
        n_proposals=args.n_proposals or cfg.train.n_proposals,
        seed=cfg.train.seed if args.seed is None else args.seed,
        weight_decay=cfg.train.weight_decay,
        grad_clip=cfg.train.grad_clip,
        warmup=cfg.train.warmup,
        augment=cfg.train.augment,
    )


def cmd_datagen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    generate_dataset(
        out, args.count or cfg.data.count, cfg.train.seed if args.seed is None else args.seed,
        size=args.size or cfg.data.size,
    )
    print(f"wrote synthetic dataset to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    level = _level(args.level)
    data_dir = Path(args.data)
    aset = _load_level(data_dir, level)
    samples = prepare_samples(aset, data_dir / "images", cfg.model)
    schedule = Schedule.cosine(cfg.schedule.timesteps, cfg.schedule.s)
    stage = _stage_config(cfg, level, args)
    init = None
    if args.init:
        if not Path(args.init).exists():
            raise CliError(EXIT_MISSING, f"missing checkpoint: {args.init}")
        init, _ = load_checkpoint(args.init)
    cache = None
    if args.cache:
        if not Path(args.cache).exists():
            raise CliError(EXIT_MISSING, f"missing cache file: {args.cache}")
        cache = InferredBoxCache.load(args.cache)
        stage = dataclasses.replace(stage, use_manipulation=True)
    try:
        params, metrics = train_stage(
            stage, samples, cfg.model, schedule, init=init, cache=cache,
            out_dir=args.out,
        )
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    out = Path(args.out)
    save_checkpoint(
        out / "final.bin", params,
        {"level": level.value, "config_fingerprint": cfg.fingerprint()},
    )
    print(f"trained {len(metrics)} logged points; checkpoint at {out / 'final.bin'}")
    return EXIT_OK


def cmd_pipeline(args, cfg: RunConfig) -> int:
    data_dir = Path(args.data)
    schedule = Schedule.cosine(cfg.schedule.timesteps, cfg.schedule.s)
    datasets = {}
    for level in HierarchyLevel:
        aset = _load_level(data_dir, level)
        datasets[level] = prepare_samples(aset, data_dir / "images", cfg.model)
    eval_datasets = None
    if args.eval_data:
        eval_dir = Path(args.eval_data)
        eval_datasets = {}
        for level in HierarchyLevel:
            aset = _load_level(eval_dir, level)
            eval_datasets[level] = prepare_samples(
                aset, eval_dir / "images", cfg.model
            )
    base = _stage_config(cfg, HierarchyLevel.QUADRANT_ONLY, args)
    plan = make_plan(args.arm, base)
    out = Path(args.out)
    try:
        result = run_pipeline(
            plan, datasets, cfg.model, schedule, out_dir=out,
            eval_datasets=eval_datasets, infer_steps=cfg.schedule.steps,
        )
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    for i, sr in enumerate(result.stages):
        save_checkpoint(
            out / f"stage_{i}_{sr.level.value}" / "final.bin", sr.params,
            {"level": sr.level.value, "arm": plan.arm,
             "config_fingerprint": cfg.fingerprint()},
        )
    print(result.report_text())
    return EXIT_OK


def _detections_doc(image_ids, dets_per_image):
    doc = {"images": []}
    for image_id, dets in zip(image_ids, dets_per_image):
        doc["images"].append(
            {
                "id": image_id,
                "detections": [
                    {
                        "box_cxcywh": [d.box.cx, d.box.cy, d.box.w, d.box.h],
                        "score": d.score,
                        "probs_quadrant": d.probs_q.tolist(),
                        "probs_enumeration": d.probs_e.tolist(),
                        "probs_diagnosis": d.probs_d.tolist(),
                    }
                    for d in dets
                ],
            }
        )
    return doc


def cmd_infer(args, cfg: RunConfig) -> int:
    level = _level(args.level)
    if not Path(args.checkpoint).exists():
        raise CliError(EXIT_MISSING, f"missing checkpoint: {args.checkpoint}")
    params, _ = load_checkpoint(args.checkpoint)
    from .model import encode_image

    grids, ids = [], []
    for p in args.images:
        path = Path(p)
        if not path.exists():
            raise CliError(EXIT_MISSING, f"missing image: {path}")
        grids.append(encode_image(read_pgm(path), cfg.model.grid))
        ids.append(path.stem)
    schedule = Schedule.cosine(cfg.schedule.timesteps, cfg.schedule.s)
    dets = infer(
        params, grids, level, cfg.model, schedule,
        n_proposals=args.n_proposals or cfg.train.n_proposals,
        steps=cfg.schedule.steps, seed=cfg.train.seed if args.seed is None else args.seed,
        eta=cfg.schedule.eta, renewal_threshold=cfg.infer.renewal_threshold,
        nms_iou=cfg.infer.nms_iou,
    )
    doc = _detections_doc(ids, dets)
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
    else:
        print(json.dumps(doc, indent=1))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .evalmetrics import build_report
    from .matching import Detection

    level = _level(args.level)
    data_dir = Path(args.data)
    aset = _load_level(data_dir, level)
    samples = prepare_samples(aset, data_dir / "images", cfg.model)
    if args.oracle:
        dets = []
        for s in samples:
            per_img = []
            for box, lab in s.gts:
                probs_q = np.zeros(4)
                probs_q[lab.quadrant] = 1.0
                probs_e = np.zeros(8)
                probs_d = np.zeros(4)
                if lab.enumeration is not None:
                    probs_e[lab.enumeration] = 1.0
                if lab.diagnosis is not None:
                    probs_d[lab.diagnosis] = 1.0
                per_img.append(
                    Detection(box=box, probs_q=probs_q, probs_e=probs_e,
                              probs_d=probs_d, score=1.0)
                )
            dets.append(per_img)
        tasks = mask_for(level).active_heads
        report = build_report(
            dets, [s.gts for s in samples],
            [(s.width, s.height) for s in samples], tasks=tasks,
        )
    else:
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise CliError(EXIT_MISSING, f"missing checkpoint: {args.checkpoint}")
        params, _ = load_checkpoint(args.checkpoint)
        schedule = Schedule.cosine(cfg.schedule.timesteps, cfg.schedule.s)
        report = evaluate_params(
            params, level, samples, cfg.model, schedule,
            n_proposals=args.n_proposals or cfg.train.n_proposals,
            steps=cfg.schedule.steps,
            seed=cfg.train.seed if args.seed is None else args.seed,
        )
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.write_text(report.table() + "\n")
        kv = out.with_suffix(".kv")
        with open(kv, "w", encoding="utf-8") as f:
            for key, val in report.key_values().items():
                f.write(f"{key}={100 * val:.3f}\n")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    from .render import caption, render_overlay

    level = _level(args.level)
    data_dir = Path(args.data)
    aset = _load_level(data_dir, level)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_image = aset.by_image()
    for info in aset.images:
        img = read_pgm(data_dir / "images" / info.file_name)
        items = [(a.box, caption(a.label)) for a in by_image[info.id]]
        canvas = render_overlay(img, items)
        write_ppm(out_dir / f"{info.id}.ppm", canvas)
    print(f"rendered {len(aset.images)} overlays to {out_dir}")
    return EXIT_OK


def cmd_validate(args, cfg: RunConfig) -> int:
    level = _level(args.level)
    path = Path(args.annotations)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"missing annotation file: {path}")
    try:
        aset = load_annotations(path, level)
    except AnnotationError as e:
        for idx, msg in e.errors:
            print(f"record {idx}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    print(
        f"ok: {len(aset.images)} images, {len(aset.annotations)} annotations "
        f"at level {level.value}"
    )
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    level = _level(args.level)
    aset = load_annotations(Path(args.annotations), level)
    train_ids, val_ids, test_ids = split_manifest(
        aset, (args.train_frac, args.val_frac, args.test_frac),
        cfg.train.seed if args.seed is None else args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ids in (("train", train_ids), ("val", val_ids), ("test", test_ids)):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))
    print(f"split {len(aset.images)} images into "
          f"{len(train_ids)}/{len(val_ids)}/{len(test_ids)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dentdet",
        description="Diffusion-based hierarchical multi-label tooth detection",
    )
    p.add_argument(
        "--config",
        help=f"YAML run config (default: ${ENV_CONFIG} if set)",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("datagen", help="emit a synthetic three-level dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--size", type=int)
    sp.set_defaults(fn=cmd_datagen)

    sp = sub.add_parser("train", help="train a single hierarchy stage")
    sp.add_argument("--data", required=True)
    sp.add_argument("--level", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", help="checkpoint to start from")
    sp.add_argument("--cache", help="inferred-box cache (enables manipulation)")
    for name in ("--iterations", "--batch-size", "--n-proposals", "--seed"):
        sp.add_argument(name, type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("pipeline", help="full staged training (a -> b -> c)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--arm", choices=ARMS, default="full")
    sp.add_argument("--eval-data")
    for name in ("--iterations", "--batch-size", "--n-proposals", "--seed"):
        sp.add_argument(name, type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(fn=cmd_pipeline)

    sp = sub.add_parser("infer", help="detect boxes on images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--level", required=True)
    sp.add_argument("--images", nargs="+", required=True)
    sp.add_argument("--out")
    sp.add_argument("--n-proposals", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="COCO-style report over a labeled set")
    sp.add_argument("--data", required=True)
    sp.add_argument("--level", default="c")
    sp.add_argument("--checkpoint")
    sp.add_argument("--oracle", action="store_true",
                    help="evaluate ground truth copied as detections")
    sp.add_argument("--out")
    sp.add_argument("--n-proposals", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("render", help="draw labeled boxes onto images")
    sp.add_argument("--data", required=True)
    sp.add_argument("--level", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("validate", help="lint an annotation file")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--level", required=True)
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("split", help="deterministic train/val/test manifest")
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--level", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--train-frac", type=float, required=True)
    sp.add_argument("--val-frac", type=float, required=True)
    sp.add_argument("--test-frac", type=float, required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_split)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"config fingerprint: {cfg.fingerprint()}", file=sys.stderr)
    try:
        return args.fn(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except AnnotationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
