"""Synthetic end-to-end and domain-shift experiments.

Shared by ``scripts/`` and the acceptance suite so both run the same code.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import hierarchy, mil, synth
from .evaluation import auc, fig3_sensitivities, roc_auc_ovr
from .taxonomy import CLASSES, MEL_SUSPECT, SUSPECT_CLASSES, SpecimenClass
from .uncertainty import CalibrationTargets, MCConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSetup:
    dim: int = 128
    per_class: int = 200
    delta: float = 0.6
    sigma: float = 0.5
    fractions: tuple = (0.7, 0.15, 0.15)
    seed: int = 7

    def prototypes(self) -> synth.PrototypeSet:
        return synth.PrototypeSet.make(self.dim, self.delta, self.sigma, seed=self.seed)

    def dataset(self, **kw) -> List[mil.SpecimenBag]:
        counts = {c: self.per_class for c in CLASSES}
        return synth.gen_dataset(counts, self.prototypes(), self.fractions, seed=self.seed, **kw)


@dataclass
class SplitMetrics:
    aucs: Dict[str, float]
    suspect_sensitivity: float
    high_ppv: float
    n_high_predicted: int
    sensitivities: Dict[str, float]

    def ppv_floor(self, target: float, z: float = 1.96) -> float:
        """Lowest PPV consistent with ``target`` under binomial noise at this sample size."""
        n = max(self.n_high_predicted, 1)
        return target - z * np.sqrt(target * (1.0 - target) / n)


def split_metrics(predictions: Sequence[hierarchy.Prediction], bags: Sequence) -> SplitMetrics:
    truths = [SpecimenClass(b.label) for b in bags]
    scores = {k: [p.class_scores()[k] for p in predictions] for k in [c.value for c in CLASSES] + [MEL_SUSPECT]}
    aucs = {k: c.auc for k, c in roc_auc_ovr(scores, truths).items()}
    finals = [p.final for p in predictions]
    sens = fig3_sensitivities(finals, truths)
    n_high = sum(f.name == SpecimenClass.MEL_HIGH.value for f in finals)
    return SplitMetrics(aucs, sens["suspect"], sens["high_ppv"], n_high, sens)


@dataclass(frozen=True)
class EndToEndConfig:
    data: SyntheticSetup = field(default_factory=SyntheticSetup)
    hierarchy: hierarchy.HierarchyConfig = field(default_factory=hierarchy.desk_scale_config)
    targets: CalibrationTargets = field(default_factory=CalibrationTargets)
    mc: MCConfig = field(default_factory=MCConfig)


@dataclass
class EndToEndResult:
    model: hierarchy.PDLSModel
    bags: List[mil.SpecimenBag]
    test_predictions: List[hierarchy.Prediction]
    metrics: SplitMetrics
    seconds: Dict[str, float]

    @property
    def test_bags(self) -> List[mil.SpecimenBag]:
        return hierarchy.split_bags(self.bags, "test")

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds.values())


def run_end_to_end(config: EndToEndConfig = EndToEndConfig()) -> EndToEndResult:
    """Generate, train, calibrate on the validation split and evaluate on the test split."""
    seconds = {}
    t = time.perf_counter()
    bags = config.data.dataset()
    seconds["generate"] = time.perf_counter() - t

    t = time.perf_counter()
    model = hierarchy.train_hierarchy(bags, config.hierarchy)
    seconds["train"] = time.perf_counter() - t

    t = time.perf_counter()
    model = hierarchy.calibrate(model, hierarchy.split_bags(bags, "val"), config.targets, config.mc)
    seconds["calibrate"] = time.perf_counter() - t

    t = time.perf_counter()
    test = hierarchy.split_bags(bags, "test")
    preds = [hierarchy.infer_specimen(model, b, config.mc) for b in test]
    seconds["infer"] = time.perf_counter() - t
    metrics = split_metrics(preds, test)
    log.info("end-to-end: %s", {k: round(v, 1) for k, v in seconds.items()})
    return EndToEndResult(model, bags, preds, metrics, seconds)


def suspect_auc(model: hierarchy.PDLSModel, bags: Sequence, mc: MCConfig) -> float:
    """One-vs-rest AUC of the upstream suspect confidence for Intermediate or High truth."""
    scores = [hierarchy.raw_predict(model, b, mc).upstream_suspect_confidence for b in bags]
    return auc([SpecimenClass(b.label) in SUSPECT_CLASSES for b in bags], scores)


@dataclass(frozen=True)
class DomainShiftConfig:
    shift: synth.DomainShift = field(default_factory=lambda: synth.DomainShift(mix=0.6, offset_norm=2.0, scale=1.5, seed=3))
    per_class: int = 100
    lab_id: str = "labB"
    data_seed: int = 11
    finetune: hierarchy.FinetuneConfig = field(default_factory=lambda: hierarchy.FinetuneConfig(
        fit=mil.FitConfig(max_epochs=30, patience=8, lr=3e-4)))


@dataclass
class DomainShiftResult:
    reference_auc: float
    shifted_auc_before: float
    shifted_auc_after: float
    calibration_ids: List[str]
    test_ids: List[str]
    model: hierarchy.PDLSModel


def run_domain_shift(model: hierarchy.PDLSModel, reference_test: Sequence, setup: SyntheticSetup,
                     config: DomainShiftConfig = DomainShiftConfig(), mc: MCConfig = MCConfig()) -> DomainShiftResult:
    """Fine-tune a reference-lab model on 255 specimens from a shifted lab.

    The new lab draws from the same prototypes through an affine embedding
    distortion. The calibration set is picked from its train/val pool, and
    suspect AUC is measured on its held-out test split before and after.
    """
    lab = synth.gen_dataset({c: config.per_class for c in CLASSES}, setup.prototypes(), setup.fractions,
                            seed=config.data_seed, lab_id=config.lab_id, shift=config.shift)
    pool = [b for b in lab if b.split != "test"]
    test = hierarchy.split_bags(lab, "test")
    ft = config.finetune
    calibration = hierarchy.select_calibration_set(pool, ft.n_train + ft.n_val, ft.seed)
    reference = suspect_auc(model, reference_test, mc)
    before = suspect_auc(model, test, mc)
    tuned = hierarchy.finetune(model, calibration, ft)
    after = suspect_auc(tuned, test, mc)
    log.info("suspect AUC: reference %.4f, shifted %.4f -> %.4f", reference, before, after)
    return DomainShiftResult(reference, before, after, [b.specimen_id for b in calibration],
                             [b.specimen_id for b in test], tuned)
