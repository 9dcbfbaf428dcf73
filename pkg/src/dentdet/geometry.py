"""Axis-aligned box primitives: format conversion, IoU/GIoU, NMS.

Internal canonical format is center-size (cx, cy, w, h) normalized to [0, 1].
Corner format (x1, y1, x2, y2) appears only at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_SIZE = 1e-4


@dataclass(frozen=True)
class Box:
    """One box in normalized center-size coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @staticmethod
    def from_xyxy(x1: float, y1: float, x2: float, y2: float) -> "Box":
        return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def area(self) -> float:
        return max(0.0, self.w) * max(0.0, self.h)

    def clamped(self) -> "Box":
        """Clamp center into [0,1] and enforce the minimum size floor."""
        return Box(
            min(1.0, max(0.0, self.cx)),
            min(1.0, max(0.0, self.cy)),
            max(MIN_SIZE, min(1.0, self.w)),
            max(MIN_SIZE, min(1.0, self.h)),
        )

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Box":
        return Box(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    """(N, 4) center-size -> (N, 4) corners."""
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; degenerate (zero-area) inputs give 0."""
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]: IoU minus the enclosing-hull penalty."""
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    hull_w = max(ax2, bx2) - min(ax1, bx1)
    hull_h = max(ay2, by2) - min(ay1, by1)
    hull = hull_w * hull_h
    if hull <= 0:
        return 0.0
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area() + b.area() - inter
    base = inter / union if union > 0 else 0.0
    return base - (hull - union) / hull


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) center-size arrays."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64))
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU between (N, 4) and (M, 4) center-size arrays."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64))
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    iou_v = np.zeros_like(inter)
    np.divide(inter, union, out=iou_v, where=union > 0)
    htl = np.minimum(a[:, None, :2], b[None, :, :2])
    hbr = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hwh = np.clip(hbr - htl, 0.0, None)
    hull = hwh[..., 0] * hwh[..., 1]
    penalty = np.zeros_like(inter)
    np.divide(hull - union, hull, out=penalty, where=hull > 0)
    return iou_v - penalty


def nms(
    dets: list[tuple[Box, float]], iou_threshold: float
) -> list[tuple[Box, float]]:
    """Greedy non-maximum suppression.

    Output sorted by descending score; ties broken by input index.  No
    retained pair overlaps with IoU above the threshold.
    """
    if not dets:
        return []
    for _, score in dets:
        if not np.isfinite(score):
            raise ValueError("nms requires finite scores")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept: list[int] = []
    for i in order:
        if all(iou(dets[i][0], dets[j][0]) <= iou_threshold for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]
