"""WHO-2021 diagnosis rules for the four diffuse-glioma classes."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import IngestionError


class GliomaClass(enum.IntEnum):
    Glioblastoma_G4 = 0
    Oligodendroglioma = 1
    Astrocytoma_G4 = 2
    Astrocytoma_LG = 3


def classify(idh_mutant: bool, codel: bool, cdkn: bool, nmp: bool) -> GliomaClass:
    """Derive the diagnosis from marker and histology status.

    IDH wildtype dominates; among IDH-mutant tumours 1p/19q co-deletion
    takes precedence over CDKN HOMDEL and NMP.
    """
    if not idh_mutant:
        return GliomaClass.Glioblastoma_G4
    if codel:
        return GliomaClass.Oligodendroglioma
    if cdkn or nmp:
        return GliomaClass.Astrocytoma_G4
    return GliomaClass.Astrocytoma_LG


@dataclass(frozen=True)
class MarkerLabels:
    """Ground truth for one case. ``idh`` is 1 for mutant, 0 for wildtype."""

    idh: int
    codel_1p19q: int
    cdkn_homdel: int
    nmp: int
    glioma_class: GliomaClass

    def __post_init__(self):
        for name in ("idh", "codel_1p19q", "cdkn_homdel", "nmp"):
            if getattr(self, name) not in (0, 1):
                raise IngestionError(f"label {name} must be 0 or 1, got {getattr(self, name)!r}")
        expected = classify(bool(self.idh), bool(self.codel_1p19q), bool(self.cdkn_homdel), bool(self.nmp))
        if GliomaClass(self.glioma_class) != expected:
            raise IngestionError(
                f"glioma class {GliomaClass(self.glioma_class).name} contradicts markers (expected {expected.name})"
            )

    @classmethod
    def from_markers(cls, idh: int, codel: int, cdkn: int, nmp: int) -> "MarkerLabels":
        return cls(int(idh), int(codel), int(cdkn), int(nmp), classify(bool(idh), bool(codel), bool(cdkn), bool(nmp)))

    def bits(self) -> tuple[int, int, int, int]:
        return (self.idh, self.codel_1p19q, self.cdkn_homdel, self.nmp)


class Consistency(NamedTuple):
    consistent: bool
    derived: GliomaClass
    predicted: GliomaClass


def consistency(outputs) -> Consistency:
    """Compare the class implied by the four binary heads with the glioma head."""
    idh, codel, cdkn, nmp = (
        int(np.argmax(_logits(getattr(outputs, name))))
        for name in ("logits_idh", "logits_1p19q", "logits_cdkn", "logits_nmp")
    )
    derived = classify(bool(idh), bool(codel), bool(cdkn), bool(nmp))
    predicted = GliomaClass(int(np.argmax(_logits(outputs.logits_glioma))))
    return Consistency(derived == predicted, derived, predicted)


def consistency_rate(outputs_list: Iterable) -> float:
    flags = [consistency(o).consistent for o in outputs_list]
    if not flags:
        raise ValueError("consistency rate of an empty collection")
    return sum(flags) / len(flags)


def _logits(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)
