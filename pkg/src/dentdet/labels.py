"""FDI label hierarchy: head availability masks and label triples.

Three annotation regimes exist, nested: quadrant only, quadrant+enumeration,
and quadrant+enumeration+diagnosis.  Each regime supervises a prefix of the
three classification heads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

NUM_QUADRANTS = 4
NUM_ENUMERATIONS = 8
NUM_DIAGNOSES = 4

DIAGNOSIS_NAMES = ("caries", "deep caries", "periapical lesion", "impacted")

HEAD_NAMES = ("quadrant", "enumeration", "diagnosis")
HEAD_CLASS_COUNTS = {
    "quadrant": NUM_QUADRANTS,
    "enumeration": NUM_ENUMERATIONS,
    "diagnosis": NUM_DIAGNOSES,
}


class HierarchyLevel(enum.Enum):
    QUADRANT_ONLY = "quadrant"
    QUADRANT_ENUM = "quadrant_enumeration"
    FULL = "quadrant_enumeration_diagnosis"


@dataclass(frozen=True)
class HeadMask:
    """Binary indicators of which heads are supervised.

    Only the nested settings (1,0,0), (1,1,0), (1,1,1) are legal.
    """

    h_q: int
    h_e: int
    h_d: int

    def __post_init__(self):
        if (self.h_q, self.h_e, self.h_d) not in {(1, 0, 0), (1, 1, 0), (1, 1, 1)}:
            raise ValueError(
                f"illegal head mask ({self.h_q},{self.h_e},{self.h_d}); "
                "hierarchy is nested"
            )

    @property
    def active_heads(self) -> tuple[str, ...]:
        out = ["quadrant"]
        if self.h_e:
            out.append("enumeration")
        if self.h_d:
            out.append("diagnosis")
        return tuple(out)

    @property
    def deepest_head(self) -> str:
        return self.active_heads[-1]


def mask_for(level: HierarchyLevel) -> HeadMask:
    """Head availability mask for an annotation regime."""
    if level is HierarchyLevel.QUADRANT_ONLY:
        return HeadMask(1, 0, 0)
    if level is HierarchyLevel.QUADRANT_ENUM:
        return HeadMask(1, 1, 0)
    if level is HierarchyLevel.FULL:
        return HeadMask(1, 1, 1)
    raise ValueError(f"unknown hierarchy level: {level!r}")


def level_for(mask: HeadMask) -> HierarchyLevel:
    return {
        (1, 0, 0): HierarchyLevel.QUADRANT_ONLY,
        (1, 1, 0): HierarchyLevel.QUADRANT_ENUM,
        (1, 1, 1): HierarchyLevel.FULL,
    }[(mask.h_q, mask.h_e, mask.h_d)]


@dataclass(frozen=True)
class LabelTriple:
    """Zero-based class indices; a field is present iff its head is supervised."""

    quadrant: int | None = None
    enumeration: int | None = None
    diagnosis: int | None = None

    def __post_init__(self):
        if self.quadrant is None and (
            self.enumeration is not None or self.diagnosis is not None
        ):
            raise ValueError("enumeration/diagnosis present without quadrant")
        if self.enumeration is None and self.diagnosis is not None:
            raise ValueError("diagnosis present without enumeration")
        if self.quadrant is not None and not 0 <= self.quadrant < NUM_QUADRANTS:
            raise ValueError(f"quadrant index out of range: {self.quadrant}")
        if self.enumeration is not None and not 0 <= self.enumeration < NUM_ENUMERATIONS:
            raise ValueError(f"enumeration index out of range: {self.enumeration}")
        if self.diagnosis is not None and not 0 <= self.diagnosis < NUM_DIAGNOSES:
            raise ValueError(f"diagnosis index out of range: {self.diagnosis}")

    @property
    def level(self) -> HierarchyLevel:
        if self.diagnosis is not None:
            return HierarchyLevel.FULL
        if self.enumeration is not None:
            return HierarchyLevel.QUADRANT_ENUM
        return HierarchyLevel.QUADRANT_ONLY

    def class_for(self, head: str) -> int | None:
        return {
            "quadrant": self.quadrant,
            "enumeration": self.enumeration,
            "diagnosis": self.diagnosis,
        }[head]


def fdi_string(label: LabelTriple) -> str:
    """Human-readable FDI code: "Q{n}" for quadrant-only, two-digit tooth
    number otherwise, with the diagnosis name appended when present."""
    if label.quadrant is None:
        raise ValueError("fdi_string requires a quadrant")
    if label.enumeration is None:
        return f"Q{label.quadrant + 1}"
    code = f"{label.quadrant + 1}{label.enumeration + 1}"
    if label.diagnosis is not None:
        code += f" {DIAGNOSIS_NAMES[label.diagnosis]}"
    return code
