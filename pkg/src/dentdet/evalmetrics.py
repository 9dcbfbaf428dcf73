"""COCO-style average precision / average recall, decomposed per head.

Detections are matched greedily in score order to same-class ground truth
at each IoU threshold; precision-recall curves are integrated with the
101-point interpolation.  Area buckets (medium, large) are measured in
original pixel units; classes or buckets with no ground truth are excluded
from the averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, iou
from .labels import HEAD_CLASS_COUNTS

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 1.0, 0.05), 2))
AREA_MEDIUM = (32.0**2, 96.0**2)
AREA_LARGE = (96.0**2, float("inf"))

TASKS = ("quadrant", "enumeration", "diagnosis")


@dataclass(frozen=True)
class EvalInstance:
    """Per-image evaluation input for one task.

    dets: (box, class_id, score) triples; gts: (box, class_id) pairs.
    width/height give the original pixel size for area bucketing.
    """

    dets: tuple
    gts: tuple
    width: int
    height: int


@dataclass(frozen=True)
class TaskMetrics:
    ar: float
    ap: float
    ap50: float
    ap75: float
    ap_m: float
    ap_l: float

    def as_dict(self) -> dict[str, float]:
        return {
            "AR": self.ar,
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_m": self.ap_m,
            "AP_l": self.ap_l,
        }


@dataclass(frozen=True)
class EvalReport:
    tasks: dict[str, TaskMetrics]

    def table(self) -> str:
        cols = ("AR", "AP", "AP50", "AP75", "AP_m", "AP_l")
        lines = ["task         " + "".join(f"{c:>8}" for c in cols)]
        for task, tm in self.tasks.items():
            vals = tm.as_dict()
            cells = "".join(
                f"{100 * vals[c]:>8.1f}" if vals[c] >= 0 else f"{'-':>8}"
                for c in cols
            )
            lines.append(f"{task:<13}" + cells)
        return "\n".join(lines)

    def key_values(self) -> dict[str, float]:
        return {
            f"{task}/{k}": v
            for task, tm in self.tasks.items()
            for k, v in tm.as_dict().items()
        }


def _area_px(box: Box, width: int, height: int) -> float:
    return box.w * width * box.h * height


def _class_pr(
    instances: list[EvalInstance],
    cls: int,
    thr: float,
    max_dets: int,
    area_range: tuple[float, float] | None,
):
    """Greedy matching for one (class, IoU threshold, area bucket).

    Returns (tp flags, fp flags, det scores, number of counted gts), or
    None when the bucket holds no ground truth of this class.
    """
    records = []  # (score, image index, det index, box)
    gt_boxes: list[list[Box]] = []
    gt_ignore: list[np.ndarray] = []
    n_gt = 0
    for img_i, inst in enumerate(instances):
        boxes = [b for b, c in inst.gts if c == cls]
        if area_range is None:
            ignore = np.zeros(len(boxes), dtype=bool)
        else:
            areas = np.array(
                [_area_px(b, inst.width, inst.height) for b in boxes]
            )
            ignore = (
                (areas < area_range[0]) | (areas >= area_range[1])
                if len(boxes)
                else np.zeros(0, dtype=bool)
            )
        gt_boxes.append(boxes)
        gt_ignore.append(ignore)
        n_gt += int((~ignore).sum())
        dets = [(b, s) for b, c, s in inst.dets if c == cls]
        dets.sort(key=lambda bs: -bs[1])
        for det_i, (b, s) in enumerate(dets[:max_dets]):
            records.append((s, img_i, det_i, b))
    if n_gt == 0:
        return None
    # Global score order; ties broken by (image, detection index).
    records.sort(key=lambda r: (-r[0], r[1], r[2]))
    taken = [np.zeros(len(bs), dtype=bool) for bs in gt_boxes]
    tp = np.zeros(len(records), dtype=bool)
    fp = np.zeros(len(records), dtype=bool)
    for ri, (s, img_i, det_i, b) in enumerate(records):
        best_j = -1
        best_iou = 0.0
        best_ignored_j = -1
        for j, gb in enumerate(gt_boxes[img_i]):
            if taken[img_i][j]:
                continue
            v = iou(b, gb)
            if v < thr:
                continue
            if not gt_ignore[img_i][j]:
                if best_j < 0 or v > best_iou:
                    best_j, best_iou = j, v
            elif best_ignored_j < 0:
                best_ignored_j = j
        if best_j >= 0:
            taken[img_i][best_j] = True
            tp[ri] = True
        elif best_ignored_j >= 0:
            taken[img_i][best_ignored_j] = True  # ignored match: neither tp nor fp
        else:
            if area_range is not None:
                inst = instances[img_i]
                a = _area_px(b, inst.width, inst.height)
                if a < area_range[0] or a >= area_range[1]:
                    continue  # detection outside the bucket: ignored
            fp[ri] = True
    return tp, fp, n_gt


def _ap_from_flags(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated average precision."""
    counted = tp | fp
    tp_c = np.cumsum(tp[counted])
    fp_c = np.cumsum(fp[counted])
    if len(tp_c) == 0:
        return 0.0
    recall = tp_c / n_gt
    precision = tp_c / (tp_c + fp_c)
    # Monotone envelope from the right.
    prec_interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += prec_interp[idx] if idx < len(prec_interp) else 0.0
    return ap / 101.0


def evaluate(
    instances: list[EvalInstance],
    task: str,
    max_dets: int = 100,
) -> TaskMetrics:
    """Task metrics over a set of images.

    Every image must carry ground truth labeled for the task (evaluation is
    restricted to fully labeled data for the deeper heads).
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    num_classes = HEAD_CLASS_COUNTS[task]

    def mean_ap(thresholds, area_range):
        per_class = []
        for cls in range(num_classes):
            vals = []
            for thr in thresholds:
                res = _class_pr(instances, cls, thr, max_dets, area_range)
                if res is None:
                    vals = None
                    break
                vals.append(_ap_from_flags(res[0], res[1], res[2]))
            if vals is not None:
                per_class.append(float(np.mean(vals)))
        return float(np.mean(per_class)) if per_class else -1.0

    def mean_recall():
        per_class = []
        for cls in range(num_classes):
            vals = []
            for thr in IOU_THRESHOLDS:
                res = _class_pr(instances, cls, thr, max_dets, None)
                if res is None:
                    vals = None
                    break
                vals.append(res[0].sum() / res[2])
            if vals is not None:
                per_class.append(float(np.mean(vals)))
        return float(np.mean(per_class)) if per_class else -1.0

    if not any(inst.gts for inst in instances):
        raise ValueError(f"no ground truth labeled for task {task!r}")
    return TaskMetrics(
        ar=mean_recall(),
        ap=mean_ap(IOU_THRESHOLDS, None),
        ap50=mean_ap((0.5,), None),
        ap75=mean_ap((0.75,), None),
        ap_m=mean_ap(IOU_THRESHOLDS, AREA_MEDIUM),
        ap_l=mean_ap(IOU_THRESHOLDS, AREA_LARGE),
    )


def detections_to_eval(dets, task: str):
    """Convert decoder detections to (box, class, score) triples for a task.

    The per-class score is the display probability of the argmax class,
    weighted by objectness (one minus the background probability of the
    deepest supervised head) when available.
    """
    out = []
    for d in dets:
        probs = d.display_probs(task)
        cls = int(np.argmax(probs))
        score = float(probs[cls])
        if d.loss_probs:
            deepest = list(d.loss_probs)[-1]
            full = d.loss_probs[deepest]
            if full.shape[0] == HEAD_CLASS_COUNTS[deepest] + 1:
                score *= 1.0 - float(full[-1])
        out.append((d.box, cls, score))
    return tuple(out)


def build_report(per_image_dets, per_image_gts, sizes, tasks=TASKS) -> EvalReport:
    """Evaluate several tasks over the same images.

    per_image_gts holds (Box, LabelTriple) pairs; labels must carry every
    requested task's field.
    """
    report = {}
    for task in tasks:
        instances = []
        for dets, gts, (w, h) in zip(per_image_dets, per_image_gts, sizes):
            gt_triples = []
            for box, lab in gts:
                c = lab.class_for(task)
                if c is None:
                    raise ValueError(
                        f"ground truth lacks {task} labels; "
                        "evaluation needs fully labeled data for this task"
                    )
                gt_triples.append((box, c))
            instances.append(
                EvalInstance(
                    dets=detections_to_eval(dets, task),
                    gts=tuple(gt_triples),
                    width=w,
                    height=h,
                )
            )
        report[task] = evaluate(instances, task)
    return EvalReport(tasks=report)
