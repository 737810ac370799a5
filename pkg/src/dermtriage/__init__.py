"""Hierarchical attention-MIL triage of skin specimens with Monte Carlo dropout confidences."""

from .errors import PDLSError
from .hierarchy import PDLSModel, Prediction, calibrate, finetune, infer_specimen, train_hierarchy
from .mil import BagModel, SpecimenBag
from .taxonomy import CLASSES, FinalLabel, SpecimenClass

__version__ = "0.1.0"

__all__ = [
    "BagModel", "CLASSES", "FinalLabel", "PDLSError", "PDLSModel", "Prediction", "SpecimenBag",
    "SpecimenClass", "calibrate", "finetune", "infer_specimen", "train_hierarchy",
]
