"""Detection overlay rendering with a built-in 5x7 bitmap font.

Writes portable pixmaps so no imaging dependency is needed.  Captions follow
the "Q{n} N{n} D{NAME}" style.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box
from .labels import DIAGNOSIS_NAMES, LabelTriple
from .matching import Detection

# Rows of 5-bit integers, top to bottom.
FONT_5X7 = {
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    " ": (0, 0, 0, 0, 0, 0, 0),
    "-": (0, 0, 0, 0x0E, 0, 0, 0),
    ".": (0, 0, 0, 0, 0, 0x0C, 0x0C),
}


def caption(label: LabelTriple) -> str:
    parts = [f"Q{label.quadrant + 1}"]
    if label.enumeration is not None:
        parts.append(f"N{label.quadrant + 1}{label.enumeration + 1}")
    if label.diagnosis is not None:
        parts.append(f"D{DIAGNOSIS_NAMES[label.diagnosis].upper()}")
    return " ".join(parts)


def detection_caption(det: Detection) -> str:
    q = int(np.argmax(det.probs_q))
    e = int(np.argmax(det.probs_e))
    d = int(np.argmax(det.probs_d))
    return caption(LabelTriple(q, e, d))


def draw_text(img: np.ndarray, x: int, y: int, text: str, color) -> None:
    h, w = img.shape[:2]
    for ci, ch in enumerate(text.upper()):
        glyph = FONT_5X7.get(ch, FONT_5X7[" "])
        gx = x + ci * 6
        for r, bits in enumerate(glyph):
            for c in range(5):
                if bits & (1 << (4 - c)):
                    yy, xx = y + r, gx + c
                    if 0 <= yy < h and 0 <= xx < w:
                        img[yy, xx] = color


def draw_box(img: np.ndarray, box: Box, color) -> None:
    h, w = img.shape[:2]
    x1, y1, x2, y2 = box.to_xyxy()
    px1 = int(np.clip(round(x1 * w), 0, w - 1))
    px2 = int(np.clip(round(x2 * w), 0, w - 1))
    py1 = int(np.clip(round(y1 * h), 0, h - 1))
    py2 = int(np.clip(round(y2 * h), 0, h - 1))
    img[py1, px1 : px2 + 1] = color
    img[py2, px1 : px2 + 1] = color
    img[py1 : py2 + 1, px1] = color
    img[py1 : py2 + 1, px2] = color


def render_overlay(img: np.ndarray, items) -> np.ndarray:
    """Color overlay of (Box, caption) pairs on a grayscale image."""
    canvas = np.stack([np.asarray(img, dtype=np.uint8)] * 3, axis=-1)
    color = np.array([0, 255, 0], dtype=np.uint8)
    text_color = np.array([255, 255, 0], dtype=np.uint8)
    h, w = canvas.shape[:2]
    for box, text in items:
        draw_box(canvas, box, color)
        x1, y1, _, _ = box.to_xyxy()
        tx = int(np.clip(round(x1 * w), 0, w - 1))
        ty = int(round(y1 * h)) - 9
        if ty < 0:
            ty = int(round(y1 * h)) + 2
        draw_text(canvas, tx, ty, text, text_color)
    return canvas
