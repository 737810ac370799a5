"""Specimen classes, MPATH mapping, diagnosis vocabulary and consensus review."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import IncompleteReviewError, InvalidInputError, UnknownDiagnosisError


class SpecimenClass(str, enum.Enum):
    BASALOID = "basaloid"
    SQUAMOUS = "squamous"
    MEL_LOW = "mel_low"
    MEL_INT = "mel_int"
    MEL_HIGH = "mel_high"
    OTHER = "other"

    def __str__(self):
        return self.value


CLASSES = tuple(SpecimenClass)
MELANOCYTIC = (SpecimenClass.MEL_LOW, SpecimenClass.MEL_INT, SpecimenClass.MEL_HIGH)
SUSPECT_CLASSES = (SpecimenClass.MEL_INT, SpecimenClass.MEL_HIGH)
REST_CLASSES = (SpecimenClass.BASALOID, SpecimenClass.SQUAMOUS, SpecimenClass.MEL_LOW, SpecimenClass.OTHER)

MEL_SUSPECT = "mel_suspect"
FINAL_LABELS = tuple(c.value for c in CLASSES) + (MEL_SUSPECT,)

SUSPECT = "suspect"
REST = "rest"


def severity(cls: SpecimenClass) -> int:
    """Position on the melanocytic continuum (0 low, 1 intermediate, 2 high)."""
    return MELANOCYTIC.index(SpecimenClass(cls))


def parse_class(value) -> SpecimenClass:
    try:
        return SpecimenClass(value)
    except ValueError:
        raise InvalidInputError(
            f"unknown class string {value!r}; expected one of {[c.value for c in CLASSES]}"
        ) from None


@dataclass(frozen=True)
class FinalLabel:
    """Label emitted by the inference pipeline.

    ``name`` is one of the six class strings or ``"mel_suspect"``.
    """

    name: str
    low_confidence: bool = False

    def __post_init__(self):
        if self.name not in FINAL_LABELS:
            raise InvalidInputError(f"invalid final label {self.name!r}")


def mpath_to_class(score: int) -> SpecimenClass:
    if isinstance(score, bool) or int(score) != score or not 1 <= score <= 5:
        raise InvalidInputError(f"MPATH score must be an integer in 1..5, got {score!r}")
    if score <= 2:
        return SpecimenClass.MEL_LOW
    if score == 3:
        return SpecimenClass.MEL_INT
    return SpecimenClass.MEL_HIGH


# Table 1 entities, plus the nevus names that appear only in the per-diagnosis
# report and fall under "Conventional Melanocytic Nevus".
_VOCABULARY = {
    SpecimenClass.BASALOID: (
        "Nodular Basal Cell Carcinoma",
        "Basal Cell Carcinoma, NOS",
        "Basal Cell Carcinoma, Morphea type",
        "Pilomatrixoma",
        "Infiltrative Basal Cell Carcinoma",
        "Basal Cell Carcinoma",
    ),
    SpecimenClass.SQUAMOUS: (
        "Invasive Squamous Cell Carcinoma",
        "Squamous Cell Carcinoma in situ",
        "Bowen's Disease",
        "Fibrokeratoma",
        "Warty Dyskeratorma",
        "Squamous Cell Carcinoma",
    ),
    SpecimenClass.MEL_HIGH: ("Melanoma",),
    SpecimenClass.MEL_INT: ("Melanoma In Situ", "Severe Dysplasia"),
    SpecimenClass.MEL_LOW: (
        "Conventional Melanocytic Nevus",
        "Mild Dysplasia",
        "Moderate Dysplasia",
        "Halo Nevus",
        "Dysplastic Nevus, NOS",
        "Spitz Nevus",
        "Blue Nevus",
        "Dysplastic Nevus",
        "Dermal Nevus",
        "Compound Nevus",
        "Junctional Nevus",
    ),
    SpecimenClass.OTHER: ("Other Diagnoses",),
}

DIAGNOSES = {name: cls for cls, names in _VOCABULARY.items() for name in names}
_BY_KEY = {name.casefold(): name for name in DIAGNOSES}


@dataclass(frozen=True)
class Diagnosis:
    name: str
    cls: SpecimenClass


def canonical_diagnosis(name: str) -> str:
    try:
        return _BY_KEY[str(name).strip().casefold()]
    except KeyError:
        raise UnknownDiagnosisError(name, DIAGNOSES) from None


def diagnosis_to_class(name: str) -> SpecimenClass:
    return DIAGNOSES[canonical_diagnosis(name)]


def diagnoses_for(cls: SpecimenClass) -> tuple:
    return _VOCABULARY[SpecimenClass(cls)]


def suspect_grouping(cls: SpecimenClass) -> str:
    return SUSPECT if SpecimenClass(cls) in SUSPECT_CLASSES else REST


@dataclass(frozen=True)
class ConsensusDecision:
    outcome: Optional[SpecimenClass]
    reviews_used: int

    @property
    def excluded(self) -> bool:
        return self.outcome is None


def consensus(first_three: Sequence, extra_two: Optional[Sequence] = None) -> ConsensusDecision:
    """Consensus label from three reviews, escalating to two more on a 2/3 split.

    A specimen is kept when all three agree, or when two agree and both extra
    reviewers confirm the majority. Everything else is excluded, including a
    three-way split.
    """
    first = [SpecimenClass(c) for c in first_three]
    if len(first) != 3:
        raise InvalidInputError(f"expected 3 initial reviews, got {len(first)}")
    (top, votes), = Counter(first).most_common(1)
    if votes == 3:
        return ConsensusDecision(top, 3)
    if votes == 1:
        return ConsensusDecision(None, 3)
    if extra_two is None:
        raise IncompleteReviewError("2/3 majority needs two additional reviews")
    extra = [SpecimenClass(c) for c in extra_two]
    if len(extra) != 2:
        raise InvalidInputError(f"expected 2 additional reviews, got {len(extra)}")
    if all(c == top for c in extra):
        return ConsensusDecision(top, 5)
    return ConsensusDecision(None, 5)
