"""Metrics, diagnosis-level reports, worklist triage simulation and the consensus ablation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import hierarchy, synth
from .errors import InvalidInputError, LeakageError, UndefinedAUCError
from .taxonomy import (CLASSES, MEL_SUSPECT, MELANOCYTIC, SUSPECT_CLASSES, FinalLabel, SpecimenClass,
                       canonical_diagnosis, diagnosis_to_class)
from .uncertainty import CalibrationTargets, MCConfig

log = logging.getLogger(__name__)

_SUSPECT_VALUES = frozenset(c.value for c in SUSPECT_CLASSES)
_SUSPECT_BRANCH_LABELS = _SUSPECT_VALUES | {MEL_SUSPECT}


# ---------------------------------------------------------------------------
# ROC / AUC


@dataclass(frozen=True)
class ROCCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def auc(labels: Sequence, scores: Sequence) -> float:
    """Probability that a positive outranks a negative, ties counted as one half."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise InvalidInputError("labels and scores differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    # midranks; all quantities are integers or half-integers so the sum is exact
    upper = np.cumsum(counts)
    mid = upper - (counts - 1) / 2.0
    rank_sum = float(mid[inverse][y].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_curve(labels: Sequence, scores: Sequence) -> ROCCurve:
    """ROC points from a threshold sweep over the observed scores, highest first."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    a = auc(y, s)
    thresholds = np.unique(s)[::-1]
    tp = np.array([np.sum(y & (s >= t)) for t in thresholds])
    fp = np.array([np.sum(~y & (s >= t)) for t in thresholds])
    tpr = np.concatenate([[0.0], tp / y.sum()])
    fpr = np.concatenate([[0.0], fp / (~y).sum()])
    return ROCCurve(fpr, tpr, np.concatenate([[np.inf], thresholds]), a)


def roc_auc_ovr(scores: Mapping[str, Sequence], labels: Sequence) -> Dict[str, ROCCurve]:
    """One-vs-rest ROC per key of ``scores``.

    ``mel_suspect`` is scored against Intermediate and High truths together.
    """
    labels = [str(l) for l in labels]
    out = {}
    for cls, s in scores.items():
        if cls == MEL_SUSPECT:
            y = [l in _SUSPECT_VALUES for l in labels]
        else:
            y = [l == cls for l in labels]
        try:
            out[cls] = roc_curve(y, s)
        except UndefinedAUCError as exc:
            raise UndefinedAUCError(f"{cls}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# confusion metrics


@dataclass(frozen=True)
class MetricsRow:
    label: str
    ppv: float
    sensitivity: float
    f1: float
    balanced_accuracy: float
    support: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_counts(cls, label: str, tp: int, fp: int, fn: int, tn: int):
        ppv = tp / (tp + fp) if tp + fp else 0.0
        sens = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * ppv * sens / (ppv + sens) if ppv + sens else 0.0
        if tp + fn and fp + tn:
            bal = (sens + tn / (fp + tn)) / 2.0
        elif tp + fn:
            bal = sens
        elif fp + tn:
            bal = tn / (fp + tn)
        else:
            bal = 0.0
        return cls(label, ppv, sens, f1, bal, tp + fn, tp, fp, fn, tn)


def _label_name(p) -> str:
    return p.name if isinstance(p, FinalLabel) else str(p)


def _credited(pred: str, truth: str, mode: str) -> str:
    if mode == "suspect_credit" and pred == MEL_SUSPECT and truth in _SUSPECT_VALUES:
        return truth
    return pred


def _row(label, preds, truths, is_pos_truth, is_pos_pred) -> MetricsRow:
    tp = fp = fn = tn = 0
    for p, t in zip(preds, truths):
        a, b = is_pos_truth(t), is_pos_pred(p)
        tp += a and b
        fn += a and not b
        fp += b and not a
        tn += not a and not b
    return MetricsRow.from_counts(label, tp, fp, fn, tn)


def confusion_metrics(predictions: Sequence, truths: Sequence, mode: str = "strict") -> Dict[str, MetricsRow]:
    """One-vs-rest rows for the six classes plus ``mel_suspect``.

    In ``strict`` mode a Melanocytic Suspect label is a miss for every class.
    In ``suspect_credit`` mode it counts as a hit for an Intermediate or High
    truth. The ``mel_suspect`` row always treats any suspect-branch label as
    positive and Intermediate/High truths as the positive class.
    """
    if mode not in ("strict", "suspect_credit"):
        raise InvalidInputError(f"unknown metric mode {mode!r}")
    if len(predictions) != len(truths):
        raise InvalidInputError(f"{len(predictions)} predictions for {len(truths)} truths")
    truths = [str(SpecimenClass(t)) for t in truths]
    preds = [_credited(_label_name(p), t, mode) for p, t in zip(predictions, truths)]
    rows = {c.value: _row(c.value, preds, truths, lambda t, c=c.value: t == c, lambda p, c=c.value: p == c)
            for c in CLASSES}
    raw = [_label_name(p) for p in predictions]
    rows[MEL_SUSPECT] = _row(MEL_SUSPECT, raw, truths, lambda t: t in _SUSPECT_VALUES,
                             lambda p: p in _SUSPECT_BRANCH_LABELS)
    return rows


def diagnosis_report(predictions: Sequence, truths: Sequence, diagnoses: Sequence,
                     include: Sequence[str] = ()) -> Dict[str, MetricsRow]:
    """Per-diagnosis rows.

    A diagnosis's positives are its own specimens and its negatives are every
    specimen of a different class, so other diagnoses of the same class do not
    count against it. Intermediate and High diagnoses get a second row,
    ``"<diagnosis> -> mel_suspect"``, crediting any suspect-branch label.
    Diagnoses listed in ``include`` but absent from the data report support 0
    and zero rates.
    """
    if not (len(predictions) == len(truths) == len(diagnoses)):
        raise InvalidInputError("predictions, truths and diagnoses differ in length")
    if any(d is None for d in diagnoses):
        raise InvalidInputError("diagnosis metadata missing")
    names = [canonical_diagnosis(d) for d in diagnoses]
    truths = [str(SpecimenClass(t)) for t in truths]
    preds = [_label_name(p) for p in predictions]
    out = {}
    for d in sorted(set(names) | {canonical_diagnosis(d) for d in include}):
        cls = diagnosis_to_class(d).value
        idx = [i for i, (n, t) in enumerate(zip(names, truths)) if n == d or t != cls]
        sub_p, sub_t = [preds[i] for i in idx], [names[i] == d for i in idx]
        out[d] = _row(d, sub_p, sub_t, bool, lambda p, c=cls: p == c)
        if cls in _SUSPECT_VALUES:
            key = f"{d} -> {MEL_SUSPECT}"
            out[key] = _row(key, sub_p, sub_t, bool, lambda p: p in _SUSPECT_BRANCH_LABELS)
    return out


# ---------------------------------------------------------------------------
# triage simulation


@dataclass(frozen=True)
class TriageCurve:
    fractions: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_simulations: int

    def at(self, fraction: float) -> float:
        """Mean sensitivity at the first grid fraction >= ``fraction``."""
        i = int(np.searchsorted(self.fractions, fraction - 1e-12, side="left"))
        return float(self.mean[min(i, len(self.mean) - 1)])

    def fraction_to_reach(self, sensitivity: float) -> float:
        hit = np.nonzero(self.mean >= sensitivity)[0]
        return float(self.fractions[hit[0]]) if len(hit) else float("nan")


def _review_sensitivity(order_pos: np.ndarray, grid: np.ndarray) -> np.ndarray:
    n, n_pos = len(order_pos), int(order_pos.sum())
    found = np.concatenate([[0], np.cumsum(order_pos)])
    k = np.minimum(n, np.ceil(grid * n - 1e-9).astype(int))
    return found[k] / n_pos


def triage_simulation(suspect_confidence: Sequence[float], truths: Sequence, specimen_ids: Sequence[str],
                      n_simulations: int = 1000, caseload: Optional[int] = None, seed: int = 0,
                      grid_points: int = 101, max_resample: int = 100) -> TriageCurve:
    """Worklist sensitivity to Intermediate/High specimens as a function of the fraction reviewed.

    Each simulation draws a caseload from the test pool by stratified bootstrap
    (class prevalence preserved), sorts it by upstream suspect confidence
    (descending, ties by specimen id) and records the share of suspect-class
    specimens found within each review fraction.
    """
    if n_simulations < 1:
        raise InvalidInputError("need at least one simulation")
    truths = [str(SpecimenClass(t)) for t in truths]
    n = len(truths)
    if n == 0 or not (len(suspect_confidence) == len(specimen_ids) == n):
        raise InvalidInputError("test pool must be nonempty with aligned scores, truths and ids")
    if not any(t in _SUSPECT_VALUES for t in truths):
        raise InvalidInputError("test pool contains no Intermediate or High specimens")
    size = n if caseload is None else int(caseload)
    if size < 1:
        raise InvalidInputError("caseload must be positive")
    conf = np.asarray(suspect_confidence, dtype=np.float64)
    is_pos = np.array([t in _SUSPECT_VALUES for t in truths])
    # global rank order once; a bootstrap sample sorted by this rank reproduces the sort
    rank = np.empty(n, dtype=np.int64)
    rank[sorted(range(n), key=lambda i: (-conf[i], str(specimen_ids[i])))] = np.arange(n)
    pools = {c: np.array([i for i, t in enumerate(truths) if t == c]) for c in sorted(set(truths))}
    per_class = dict(zip(pools, synth.split_counts(size, [len(p) / n for p in pools.values()])))
    grid = np.linspace(0.0, 1.0, grid_points)
    curves = []
    for s in range(n_simulations):
        rng = np.random.default_rng([seed, s])
        for _ in range(max_resample):
            picks = np.concatenate([rng.choice(pools[c], size=k, replace=True) for c, k in per_class.items() if k])
            if is_pos[picks].any():
                break
        else:
            warnings.warn(f"simulation {s}: no suspect-class specimens after {max_resample} draws; skipped",
                          stacklevel=2)
            continue
        order = picks[np.argsort(rank[picks], kind="stable")]
        curves.append(_review_sensitivity(is_pos[order], grid))
    if not curves:
        raise InvalidInputError("every simulated caseload lacked suspect-class specimens")
    arr = np.stack(curves)
    return TriageCurve(grid, arr.mean(axis=0), arr.std(axis=0), len(curves))


# ---------------------------------------------------------------------------
# consensus ablation


def fig3_sensitivities(predictions: Sequence, truths: Sequence) -> Dict[str, float]:
    """Per-class sensitivities as in the consensus comparison: Intermediate and High
    with suspect credit, Low and the non-melanocytic classes strict, plus suspect
    sensitivity and High-Risk PPV."""
    strict = confusion_metrics(predictions, truths, "strict")
    credit = confusion_metrics(predictions, truths, "suspect_credit")
    out = {c.value: (credit if c in SUSPECT_CLASSES else strict)[c.value].sensitivity for c in CLASSES}
    out["melanocytic"] = _melanocytic_sensitivity(predictions, truths)
    out["suspect"] = strict[MEL_SUSPECT].sensitivity
    out["high_ppv"] = strict[SpecimenClass.MEL_HIGH.value].ppv
    return out


def _melanocytic_sensitivity(predictions, truths) -> float:
    """Share of melanocytic specimens whose label falls in the correct risk tier,
    counting Melanocytic Suspect as correct for Intermediate and High."""
    hits = total = 0
    for p, t in zip(predictions, truths):
        t = SpecimenClass(t)
        if t not in MELANOCYTIC:
            continue
        total += 1
        p = _label_name(p)
        hits += p == t.value or (t in SUSPECT_CLASSES and p == MEL_SUSPECT)
    return hits / total if total else 0.0


@dataclass
class AblationReport:
    seeds: List[int]
    consensus: List[Dict[str, float]]
    non_consensus: List[Dict[str, float]]

    def mean(self, variant: str, key: str) -> float:
        return float(np.mean([r[key] for r in getattr(self, variant)]))

    def std(self, variant: str, key: str) -> float:
        return float(np.std([r[key] for r in getattr(self, variant)]))

    def delta(self, key: str) -> float:
        """Mean over seeds of consensus minus non-consensus."""
        return float(np.mean([a[key] - b[key] for a, b in zip(self.consensus, self.non_consensus)]))

    def delta_std(self, key: str) -> float:
        return float(np.std([a[key] - b[key] for a, b in zip(self.consensus, self.non_consensus)]))

    def keys(self) -> List[str]:
        return list(self.consensus[0]) if self.consensus else []


def check_leakage(test: Sequence, *datasets: Sequence) -> None:
    test_ids = {b.specimen_id for b in test}
    for data in datasets:
        leaked = sorted(test_ids & {b.specimen_id for b in data})
        if leaked:
            raise LeakageError(f"{len(leaked)} test specimens also used for training/validation, e.g. {leaked[0]}")


def _evaluate_variant(bags, test, config: hierarchy.HierarchyConfig, targets, mc) -> Dict[str, float]:
    model = hierarchy.train_hierarchy(bags, config)
    model = hierarchy.calibrate(model, hierarchy.split_bags(bags, "val"), targets, mc)
    preds = [hierarchy.infer_specimen(model, b, mc).final for b in test]
    return fig3_sensitivities(preds, [b.label for b in test])


def ablation_run(consensus_bags: Sequence, non_consensus_bags: Sequence, test_bags: Sequence,
                 seeds: Sequence[int], config: hierarchy.HierarchyConfig = hierarchy.HierarchyConfig(),
                 targets: CalibrationTargets = CalibrationTargets(), mc: MCConfig = MCConfig()) -> AblationReport:
    """Train and evaluate a hierarchy on each dataset per seed, testing both on ``test_bags``.

    Each dataset carries its own train/val split labels.
    """
    if not seeds:
        raise InvalidInputError("need at least one seed")
    check_leakage(test_bags, consensus_bags, non_consensus_bags)
    report = AblationReport(list(seeds), [], [])
    for seed in seeds:
        cfg = replace(config, seed=seed, fit=replace(config.fit, seed=seed))
        mc_s = replace(mc, seed=seed)
        report.consensus.append(_evaluate_variant(consensus_bags, test_bags, cfg, targets, mc_s))
        report.non_consensus.append(_evaluate_variant(non_consensus_bags, test_bags, cfg, targets, mc_s))
        log.info("seed %d: suspect %.3f vs %.3f", seed, report.consensus[-1]["suspect"],
                 report.non_consensus[-1]["suspect"])
    return report


@dataclass(frozen=True)
class AblationConfig:
    dim: int = 128
    per_class: int = 200
    delta: float = 0.6
    sigma: float = 0.5
    kernel_diagonal: Optional[Mapping[str, float]] = None
    adjacent_share: float = 0.8
    identity_kernel: bool = False
    data_seed: int = 7
    seeds: tuple = (0, 1, 2, 3, 4)
    hierarchy: hierarchy.HierarchyConfig = field(default_factory=hierarchy.desk_scale_config)
    targets: CalibrationTargets = field(default_factory=CalibrationTargets)
    mc: MCConfig = field(default_factory=MCConfig)


def ablation_datasets(config: AblationConfig):
    """Synthetic consensus / non-consensus training sets and the shared consensus test set.

    Reviews are simulated for every melanocytic specimen. The consensus set
    keeps only agreed specimens with their consensus labels. The
    non-consensus set adds the excluded specimens under their first review.
    Test specimens are drawn from the consensus pool.
    """
    protos = synth.PrototypeSet.make(config.dim, config.delta, config.sigma, seed=config.data_seed)
    bags = synth.gen_dataset({c: config.per_class for c in CLASSES}, protos, seed=config.data_seed)
    if config.identity_kernel:
        kernel = synth.identity_kernel()
    else:
        kernel = synth.make_kernel(config.kernel_diagonal, config.adjacent_share)
    reviews = synth.simulate_panel(bags, kernel, seed=config.data_seed)
    kept, excluded = synth.apply_consensus_filter(bags, reviews)
    test = [b for b in kept if b.split == "test"]
    consensus_set = [b for b in kept if b.split != "test"]
    non_consensus_set = consensus_set + [b for b in excluded if b.split != "test"]
    return consensus_set, non_consensus_set, test


def ablation_experiment(config: AblationConfig = AblationConfig()) -> AblationReport:
    consensus_set, non_consensus_set, test = ablation_datasets(config)
    return ablation_run(consensus_set, non_consensus_set, test, config.seeds, config.hierarchy,
                        config.targets, config.mc)

