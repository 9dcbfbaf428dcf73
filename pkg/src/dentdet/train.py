"""Single-stage training loop and the three-stage hierarchical pipeline.

Stages run shallow to deep (quadrant -> quadrant+enumeration -> full), each
optionally receiving the previous stage's weights (transfer) and/or its
confident inferred boxes (noisy-box manipulation).  The four ablation arms
toggle those two mechanisms independently.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import AnnotationSet, random_crop_resize
from .diffusion import NoisyBoxes, Schedule, box_renewal, ddim_step, forward_noise, pad_gt_boxes
from .evalmetrics import EvalReport, build_report
from .geometry import Box, iou
from .labels import HierarchyLevel, mask_for
from .manipulate import InferredBoxCache, inference_proposals, manipulate_boxes
from .matching import Detection
from .model import (
    BatchItem,
    ModelConfig,
    ParamStore,
    decode,
    encode_image,
    init_params,
    loss_gradients,
    save_checkpoint,
    transfer_weights,
)

ARMS = ("full", "no_transfer", "no_manipulation", "neither")


@dataclass(frozen=True)
class StageConfig:
    level: HierarchyLevel
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    n_proposals: int = 64
    use_manipulation: bool = False
    use_transfer: bool = False
    seed: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup: int = 0
    augment: bool = False
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class PipelinePlan:
    arm: str
    stages: tuple[StageConfig, StageConfig, StageConfig]

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown ablation arm {self.arm!r}")
        levels = tuple(s.level for s in self.stages)
        expected = (
            HierarchyLevel.QUADRANT_ONLY,
            HierarchyLevel.QUADRANT_ENUM,
            HierarchyLevel.FULL,
        )
        if levels != expected:
            raise ValueError("pipeline stages must run quadrant -> enum -> full")


def make_plan(arm: str, base: StageConfig | None = None) -> PipelinePlan:
    """Plan for one ablation arm; later stages get the arm's mechanism flags.

    Each successive stage halves the learning rate.  Later stages refine a
    model that already localizes (via transfer and/or manipulation-spliced
    proposals) on progressively sparser supervision, and a full-rate final
    stage erodes the box-refinement behaviour learned earlier faster than
    its own sparse labels can rebuild it.
    """
    base = base or StageConfig(level=HierarchyLevel.QUADRANT_ONLY)
    manip = arm in ("full", "no_transfer")
    trans = arm in ("full", "no_manipulation")
    stages = []
    for i, level in enumerate(
        (HierarchyLevel.QUADRANT_ONLY, HierarchyLevel.QUADRANT_ENUM, HierarchyLevel.FULL)
    ):
        stages.append(
            replace(
                base,
                level=level,
                use_manipulation=manip and i > 0,
                use_transfer=trans and i > 0,
                seed=base.seed + i,
                lr=base.lr * 0.5**i,
            )
        )
    return PipelinePlan(arm=arm, stages=tuple(stages))


@dataclass
class TrainSample:
    """One image prepared for training or evaluation."""

    image_id: str
    image: np.ndarray  # uint8 grayscale, kept for augmentation
    grid_feats: np.ndarray
    gts: list  # list of (Box, LabelTriple)
    width: int
    height: int


def prepare_samples(
    aset: AnnotationSet, images_dir, cfg: ModelConfig
) -> list[TrainSample]:
    from .imageio import read_pgm

    images_dir = Path(images_dir)
    by_image = aset.by_image()
    samples = []
    for info in aset.images:
        img = read_pgm(images_dir / info.file_name)
        samples.append(
            TrainSample(
                image_id=info.id,
                image=img,
                grid_feats=encode_image(img, cfg.grid),
                gts=[(a.box, a.label) for a in by_image[info.id]],
                width=info.width,
                height=info.height,
            )
        )
    return samples


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, last_checkpoint: str | None):
        self.iteration = iteration
        self.last_checkpoint = last_checkpoint
        msg = f"non-finite loss at iteration {iteration}"
        if last_checkpoint:
            msg += f"; last good checkpoint: {last_checkpoint}"
        super().__init__(msg)


def _global_norm(grads: ParamStore, names) -> float:
    return float(np.sqrt(sum(float((grads[n] ** 2).sum()) for n in names)))


def train_stage(
    cfg: StageConfig,
    samples: list[TrainSample],
    model_cfg: ModelConfig,
    schedule: Schedule,
    init: ParamStore | None = None,
    cache: InferredBoxCache | None = None,
    out_dir=None,
) -> tuple[ParamStore, list[dict]]:
    """Train one hierarchy stage; fully reproducible from (cfg, seed).

    ``cache`` must be present iff manipulation is enabled.  Emits periodic
    loss records and checkpoints; on a non-finite loss the last good
    checkpoint is retained and :class:`TrainingDiverged` is raised.
    """
    if cfg.use_manipulation and cache is None:
        raise ValueError("manipulation enabled but no inferred-box cache given")
    if not cfg.use_manipulation and cache is not None:
        raise ValueError("cache given but manipulation disabled")
    if not samples:
        raise ValueError("no training samples")
    mask = mask_for(cfg.level)
    if init is None:
        params = init_params(model_cfg, np.random.default_rng([cfg.seed, 0]))
    else:
        params = {k: v.copy() for k, v in init.items()}
    rng = np.random.default_rng([cfg.seed, 1])
    trainable = [
        n
        for n in params
        if not any(
            n.startswith(f"head_{h}.")
            for h in ("enumeration", "diagnosis")
            if h not in mask.active_heads
        )
    ]
    m = {n: np.zeros_like(params[n]) for n in trainable}
    v = {n: np.zeros_like(params[n]) for n in trainable}
    b1, b2, eps = 0.9, 0.999, 1e-8
    metrics: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    last_ckpt = None
    log_f = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    t_start = time.perf_counter()
    try:
        for it in range(cfg.iterations):
            replace_draw = cfg.batch_size > len(samples)
            idx = rng.choice(len(samples), size=cfg.batch_size, replace=replace_draw)
            batch = []
            for i in idx:
                s = samples[i]
                gts = s.gts
                if cfg.augment:
                    _img, gts = random_crop_resize(s.image, gts, rng)
                    grid = encode_image(_img, model_cfg.grid)
                else:
                    grid = s.grid_feats
                if len(gts) > cfg.n_proposals:
                    # More targets than proposals: supervise a random subset
                    # so the one-to-one assignment stays feasible.
                    keep = rng.choice(len(gts), size=cfg.n_proposals, replace=False)
                    gts = [gts[i] for i in sorted(keep)]
                pad = pad_gt_boxes(
                    [b for b, _ in gts], cfg.n_proposals, rng, model_cfg.scale
                )
                t = int(rng.integers(1, schedule.T + 1))
                noisy = forward_noise(pad.z0, t, schedule, rng)
                z = noisy.z
                if cfg.use_manipulation:
                    z = manipulate_boxes(
                        z, cache.get(s.image_id), scale=model_cfg.scale
                    )
                gt_boxes = (
                    np.stack([b.to_array() for b, _ in gts])
                    if gts
                    else np.zeros((0, 4))
                )
                batch.append(
                    BatchItem(
                        grid_feats=grid,
                        z=z,
                        t=float(t),
                        gt_boxes=gt_boxes,
                        gt_labels=[lab for _, lab in gts],
                    )
                )
            try:
                loss, grads, bd = loss_gradients(params, batch, mask, model_cfg)
            except FloatingPointError as e:
                raise TrainingDiverged(it, str(last_ckpt) if last_ckpt else None) from e
            if not np.isfinite(loss):
                raise TrainingDiverged(it, str(last_ckpt) if last_ckpt else None)

            lr = cfg.lr
            if cfg.warmup and it < cfg.warmup:
                lr *= (it + 1) / cfg.warmup
            norm = _global_norm(grads, trainable)
            clip = min(1.0, cfg.grad_clip / norm) if norm > cfg.grad_clip else 1.0
            step = it + 1
            for n in trainable:
                g = grads[n] * clip
                m[n] = b1 * m[n] + (1 - b1) * g
                v[n] = b2 * v[n] + (1 - b2) * g * g
                mhat = m[n] / (1 - b1**step)
                vhat = v[n] / (1 - b2**step)
                params[n] -= lr * (
                    mhat / (np.sqrt(vhat) + eps) + cfg.weight_decay * params[n]
                )

            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {
                    "iteration": it,
                    "loss": float(loss),
                    "cls_q": bd.cls_q,
                    "cls_e": bd.cls_e,
                    "cls_d": bd.cls_d,
                    "l1": bd.l1,
                    "giou": bd.giou,
                    "wall_time": time.perf_counter() - t_start,
                }
                metrics.append(rec)
                if log_f:
                    log_f.write(json.dumps(rec) + "\n")
                    log_f.flush()
            if out_dir is not None and (
                (it + 1) % cfg.checkpoint_every == 0 or it == cfg.iterations - 1
            ):
                last_ckpt = out_dir / f"ckpt_{it + 1:06d}.bin"
                save_checkpoint(
                    last_ckpt,
                    params,
                    {"iteration": it + 1, "level": cfg.level.value,
                     "config_fingerprint": model_cfg.fingerprint()},
                )
    finally:
        if log_f:
            log_f.close()
    return params, metrics


def _nms_detections(dets: list[Detection], thr: float) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou(dets[i].box, dets[j].box) <= thr for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def infer(
    params: ParamStore,
    grids: list[np.ndarray],
    level: HierarchyLevel,
    model_cfg: ModelConfig,
    schedule: Schedule,
    n_proposals: int = 64,
    steps: int = 1,
    seed: int = 0,
    eta: float = 0.0,
    renewal_threshold: float = 0.5,
    nms_iou: float = 0.5,
) -> list[list[Detection]]:
    """Denoise completely noisy proposals into detections, per image.

    Deterministic for a fixed seed and eta = 0; per-image rng streams make
    results independent of processing order.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mask = mask_for(level)
    times = np.unique(
        np.round(np.linspace(schedule.T, 0, steps + 1)).astype(int)
    )[::-1]
    results = []
    for img_i, grid in enumerate(grids):
        rng = np.random.default_rng([seed, img_i])
        z = inference_proposals(n_proposals, rng, model_cfg.scale)
        for si in range(len(times) - 1):
            t, t_next = int(times[si]), int(times[si + 1])
            dets, z0_pred, _ = decode(params, grid, z, float(t), mask, model_cfg)
            nb = ddim_step(NoisyBoxes(z, t), z0_pred, t, t_next, schedule, eta, rng)
            if si < len(times) - 2:
                scores = np.array([d.score for d in dets])
                nb = box_renewal(scores, nb, renewal_threshold, rng)
            z = nb.z
        # Final readout on the denoised boxes: the chain ends with clean
        # proposals at t = 0.  Decode once to refine them (the box head can
        # correct sizes after observing the content under the denoised
        # window), then decode the refined boxes so every head scores the
        # window it would actually report.
        dets, z0_pred, _ = decode(params, grid, z, 0.0, mask, model_cfg)
        dets, _, _ = decode(params, grid, z0_pred, 0.0, mask, model_cfg)
        results.append(_nms_detections(dets, nms_iou))
    return results


def build_cache(
    params: ParamStore,
    samples: list[TrainSample],
    level: HierarchyLevel,
    model_cfg: ModelConfig,
    schedule: Schedule,
    n_proposals: int = 64,
    steps: int = 1,
    threshold: float = 0.5,
    seed: int = 0,
) -> InferredBoxCache:
    """Run inference over the next stage's images and cache confident boxes."""
    cache = InferredBoxCache()
    dets_per_image = infer(
        params,
        [s.grid_feats for s in samples],
        level,
        model_cfg,
        schedule,
        n_proposals=n_proposals,
        steps=steps,
        seed=seed,
    )
    for s, dets in zip(samples, dets_per_image):
        for d in dets:
            if d.score > threshold:
                cache.add(s.image_id, d.box, d.score, level)
    return cache


@dataclass
class StageResult:
    level: HierarchyLevel
    params: ParamStore
    metrics: list[dict]
    cache_reads: int
    copied_tensors: list[str]
    report: EvalReport | None = None


@dataclass
class PipelineResult:
    arm: str
    stages: list[StageResult] = field(default_factory=list)

    def report_text(self) -> str:
        lines = [f"ablation arm: {self.arm}"]
        for sr in self.stages:
            lines.append(f"\nstage {sr.level.value}:")
            lines.append(
                f"  transfer tensors: {len(sr.copied_tensors)}; "
                f"cache reads: {sr.cache_reads}"
            )
            if sr.report is not None:
                lines.append(
                    "\n".join("  " + ln for ln in sr.report.table().splitlines())
                )
        return "\n".join(lines) + "\n"


def evaluate_params(
    params: ParamStore,
    level: HierarchyLevel,
    eval_samples: list[TrainSample],
    model_cfg: ModelConfig,
    schedule: Schedule,
    n_proposals: int = 64,
    steps: int = 1,
    seed: int = 0,
) -> EvalReport:
    """Infer over held-out samples and score every task the level supervises."""
    dets = infer(
        params,
        [s.grid_feats for s in eval_samples],
        level,
        model_cfg,
        schedule,
        n_proposals=n_proposals,
        steps=steps,
        seed=seed,
    )
    return build_report(
        dets,
        [s.gts for s in eval_samples],
        [(s.width, s.height) for s in eval_samples],
        tasks=mask_for(level).active_heads,
    )


def run_pipeline(
    plan: PipelinePlan,
    datasets: dict[HierarchyLevel, list[TrainSample]],
    model_cfg: ModelConfig,
    schedule: Schedule,
    out_dir=None,
    eval_datasets: dict[HierarchyLevel, list[TrainSample]] | None = None,
    infer_steps: int = 1,
) -> PipelineResult:
    """Execute the three stages honoring the arm's mechanism flags."""
    for stage in plan.stages:
        if stage.level not in datasets or not datasets[stage.level]:
            raise ValueError(f"missing dataset for level {stage.level.value}")
    out_dir = Path(out_dir) if out_dir is not None else None
    result = PipelineResult(arm=plan.arm)
    prev_params: ParamStore | None = None
    prev_level: HierarchyLevel | None = None
    for i, stage in enumerate(plan.stages):
        stage_dir = out_dir / f"stage_{i}_{stage.level.value}" if out_dir else None
        copied: list[str] = []
        init = None
        if stage.use_transfer and prev_params is not None:
            fresh = init_params(model_cfg, np.random.default_rng([stage.seed, 0]))
            init, copied = transfer_weights(
                prev_params, fresh, src_mask=mask_for(prev_level)
            )
        cache = None
        if stage.use_manipulation and prev_params is not None:
            cache = build_cache(
                prev_params,
                datasets[stage.level],
                prev_level,
                model_cfg,
                schedule,
                n_proposals=stage.n_proposals,
                steps=infer_steps,
                seed=stage.seed,
            )
            if stage_dir is not None:
                stage_dir.mkdir(parents=True, exist_ok=True)
                cache.save(stage_dir / "inferred_boxes.tsv")
            cache.reads = 0  # count training reads only
        params, metrics = train_stage(
            stage,
            datasets[stage.level],
            model_cfg,
            schedule,
            init=init,
            cache=cache,
            out_dir=stage_dir,
        )
        sr = StageResult(
            level=stage.level,
            params=params,
            metrics=metrics,
            cache_reads=cache.reads if cache is not None else 0,
            copied_tensors=copied,
        )
        if eval_datasets and stage.level in eval_datasets:
            sr.report = evaluate_params(
                params,
                stage.level,
                eval_datasets[stage.level],
                model_cfg,
                schedule,
                n_proposals=stage.n_proposals,
                steps=infer_steps,
            )
        result.stages.append(sr)
        prev_params, prev_level = params, stage.level
    if out_dir is not None:
        (out_dir / "report.txt").write_text(result.report_text())
    return result
