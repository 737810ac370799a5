"""Monte Carlo dropout confidences and validation-set threshold calibration."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping, Optional, Sequence

import numpy as np

from . import mil
from .errors import InvalidInputError
from .taxonomy import CLASSES, SpecimenClass


@dataclass(frozen=True)
class MCConfig:
    n_passes: int = 100
    seed: int = 0


@dataclass(frozen=True)
class ConfidenceVector:
    """Mean class probabilities over ``n_passes`` dropout-sampled passes, per head."""

    probs: Mapping[str, np.ndarray]
    classes: Mapping[str, tuple]
    n_passes: int
    seed: tuple

    def get(self, head: str, cls: str) -> float:
        return float(self.probs[head][self.classes[head].index(str(cls))])

    def argmax(self, head: str):
        p = self.probs[head]
        i = int(np.argmax(p))
        return self.classes[head][i], float(p[i])


def specimen_seed(base_seed: int, specimen_id: str, model_name: str = "") -> list:
    """Per-specimen MC seed; independent of processing order."""
    digest = hashlib.blake2b(f"{specimen_id}\x1f{model_name}".encode(), digest_size=8).digest()
    return [int(base_seed), int.from_bytes(digest, "little")]


def mc_confidence(model: mil.BagModel, bag, n_passes: int, seed) -> ConfidenceVector:
    if n_passes < 1:
        raise InvalidInputError("need at least one Monte Carlo pass")
    samples = mil.mc_forward(model, bag, n_passes, seed)
    probs = {k: v.mean(axis=0) for k, v in samples.items()}
    classes = {hd.name: hd.classes for hd in model.heads}
    seed = tuple(seed) if isinstance(seed, (list, tuple)) else (seed,)
    return ConfidenceVector(probs, classes, n_passes, seed)


def _threshold_scan(confidences: np.ndarray, correct: np.ndarray, target: float) -> Optional[float]:
    """Smallest candidate ``c`` in ``{0, 1} | confidences`` whose ``conf >= c`` subset has
    accuracy ``>= target``; candidates selecting nothing are skipped."""
    order = np.argsort(confidences, kind="stable")
    conf = confidences[order]
    corr = correct[order].astype(np.int64)
    n = len(conf)
    suffix = np.concatenate([np.cumsum(corr[::-1])[::-1], [0]])
    for c in np.unique(np.concatenate([[0.0, 1.0], conf])):
        start = int(np.searchsorted(conf, c, side="left"))
        m = n - start
        if m == 0:
            continue
        if int(suffix[start]) / m >= target:
            return float(c)
    return None


def calibrate_accuracy_threshold(predictions: Sequence, cls, target_accuracy: float) -> Optional[float]:
    """Threshold for one predicted class from ``(confidence, predicted, true)`` triples.

    Returns ``None`` when no threshold reaches ``target_accuracy`` or when
    there are no predictions of ``cls``.
    """
    cls = str(cls)
    rows = [(float(c), str(t) == cls) for c, p, t in predictions if str(p) == cls]
    if not rows:
        warnings.warn(f"no validation predictions for {cls}; threshold undefined", stacklevel=2)
        return None
    conf = np.array([r[0] for r in rows])
    correct = np.array([r[1] for r in rows])
    return _threshold_scan(conf, correct, target_accuracy)


def calibrate_ppv_threshold(predictions: Sequence, target_ppv: float,
                            positive=SpecimenClass.MEL_HIGH) -> Optional[float]:
    """Threshold on High-Risk predictions given as ``(confidence, true class)`` pairs."""
    if not predictions:
        warnings.warn("no High-Risk validation predictions; PPV threshold undefined", stacklevel=2)
        return None
    conf = np.array([float(c) for c, _ in predictions])
    correct = np.array([str(t) == str(positive) for _, t in predictions])
    return _threshold_scan(conf, correct, target_ppv)


@dataclass(frozen=True)
class CalibrationTargets:
    accuracy: Mapping[str, float] = field(default_factory=lambda: {c.value: 0.90 for c in CLASSES})
    ppv: float = 0.60

    @classmethod
    def uniform(cls, accuracy: float = 0.90, ppv: float = 0.60):
        return cls({c.value: accuracy for c in CLASSES}, ppv)


@dataclass(frozen=True)
class ThresholdSet:
    accuracy: Mapping[str, float]
    ppv: float
    targets: CalibrationTargets = field(default_factory=CalibrationTargets)
    # keys whose target was unattainable ("ppv" for the PPV threshold); these never pass
    unattainable: FrozenSet[str] = frozenset()

    def __post_init__(self):
        for v in list(self.accuracy.values()) + [self.ppv]:
            if not 0.0 <= v <= 1.0:
                raise InvalidInputError(f"threshold {v} outside [0, 1]")

    def passes_accuracy(self, cls, confidence: float) -> bool:
        cls = str(cls)
        return cls not in self.unattainable and confidence >= self.accuracy[cls]

    def passes_ppv(self, confidence: float) -> bool:
        return "ppv" not in self.unattainable and confidence >= self.ppv


def thresholds_from_predictions(rows: Sequence, targets: CalibrationTargets) -> ThresholdSet:
    """Build a :class:`ThresholdSet` from ``(confidence, predicted, true)`` validation rows.

    Unattainable targets become threshold 1.0 and are marked so that nothing
    passes them (High-Risk predictions then fall back to Melanocytic Suspect).
    """
    acc: Dict[str, float] = {}
    unattainable = set()
    for c in CLASSES:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            t = calibrate_accuracy_threshold(rows, c.value, targets.accuracy[c.value])
        if t is None:
            warnings.warn(f"accuracy target {targets.accuracy[c.value]} unattainable for {c.value}; "
                          "threshold set to 1.0", stacklevel=2)
            acc[c.value] = 1.0
            unattainable.add(c.value)
        else:
            acc[c.value] = t
    high = [(conf, true) for conf, pred, true in rows if str(pred) == SpecimenClass.MEL_HIGH.value]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ppv = calibrate_ppv_threshold(high, targets.ppv)
    if ppv is None:
        warnings.warn(f"PPV target {targets.ppv} unattainable; threshold set to 1.0", stacklevel=2)
        ppv = 1.0
        unattainable.add("ppv")
    return ThresholdSet(acc, ppv, targets, frozenset(unattainable))


def calibrate_all(model, bags: Sequence, targets: CalibrationTargets = CalibrationTargets(),
                  mc: MCConfig = MCConfig()) -> ThresholdSet:
    """Run threshold-free inference on validation bags and calibrate every threshold."""
    from .hierarchy import raw_predict

    if not bags:
        raise InvalidInputError("calibration needs a nonempty validation set")
    rows = []
    for bag in bags:
        pred = raw_predict(model, bag, mc)
        rows.append((pred.confidence, pred.predicted, str(SpecimenClass(bag.label))))
    return thresholds_from_predictions(rows, targets)
