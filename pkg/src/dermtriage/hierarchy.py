"""The three-model hierarchy: training, routing, thresholded inference and fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import mil
from .errors import DegenerateLabelsError, InvalidInputError, MissingThresholdsError
from .taxonomy import (
    CLASSES, MEL_SUSPECT, REST, REST_CLASSES, SUSPECT, FinalLabel, SpecimenClass, suspect_grouping,
)
from .uncertainty import (
    CalibrationTargets, ConfidenceVector, MCConfig, ThresholdSet, calibrate_all, mc_confidence,
    specimen_seed,
)

log = logging.getLogger(__name__)

UPSTREAM_HEADS = {mil.SUSPECT_VS_REST: (MEL_SUSPECT, REST)}
REST_SUB_HEADS = {mil.REST_CLASSES: tuple(c.value for c in REST_CLASSES)}
MODEL_NAMES = ("upstream", "suspect_sub", "rest_sub")


@dataclass
class PDLSModel:
    upstream: mil.BagModel
    suspect_sub: mil.BagModel
    rest_sub: mil.BagModel
    thresholds: Optional[ThresholdSet] = None
    color_stats: Optional[object] = None
    fit_logs: Dict[str, object] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        dims = {m.in_dim for m in self.members().values()}
        if len(dims) != 1:
            raise InvalidInputError(f"hierarchy members disagree on embedding width: {dims}")

    def members(self) -> Dict[str, mil.BagModel]:
        return {"upstream": self.upstream, "suspect_sub": self.suspect_sub, "rest_sub": self.rest_sub}

    @property
    def in_dim(self) -> int:
        return self.upstream.in_dim


@dataclass
class HierarchyConfig:
    width: int = 1024
    attention_dim: Optional[int] = None
    dropout_rate: float = 0.5
    fit: mil.FitConfig = field(default_factory=mil.FitConfig)
    seed: int = 0


def desk_scale_config(seed: int = 7) -> HierarchyConfig:
    """Settings for the 128-d synthetic experiments: a narrower network and a faster
    learning rate than the 1024-d defaults, with early stopping."""
    return HierarchyConfig(width=128, dropout_rate=0.5,
                           fit=mil.FitConfig(max_epochs=60, patience=10, lr=3e-4), seed=seed)


def _group(bag) -> str:
    cls = SpecimenClass(bag.label)
    if cls == SpecimenClass.MEL_HIGH:
        return "high"
    if cls == SpecimenClass.MEL_INT:
        return "int"
    return "rest"


def _objectives():
    upstream = mil.SingleHeadObjective(
        mil.SUSPECT_VS_REST, lambda b: 0 if suspect_grouping(b.label) == SUSPECT else 1)
    suspect = mil.MaskedMultiTaskObjective(_group)
    rest = mil.SingleHeadObjective(mil.REST_CLASSES, lambda b: REST_CLASSES.index(SpecimenClass(b.label)))
    return upstream, suspect, rest


def _is_rest(bag) -> bool:
    return SpecimenClass(bag.label) in REST_CLASSES


def split_bags(bags: Sequence, split: str) -> List:
    return [b for b in bags if b.split == split]


def _fit_members(model: PDLSModel, train: Sequence, val: Sequence, fit_cfg: mil.FitConfig) -> PDLSModel:
    upstream_obj, suspect_obj, rest_obj = _objectives()
    rest_train = [b for b in train if _is_rest(b)]
    rest_val = [b for b in val if _is_rest(b)]
    logs = {}
    trained = {}
    for i, (name, obj, tr, va) in enumerate([
        ("upstream", upstream_obj, train, val),
        ("suspect_sub", suspect_obj, train, val),
        ("rest_sub", rest_obj, rest_train, rest_val),
    ]):
        cfg = replace(fit_cfg, seed=fit_cfg.seed * 1000 + i)
        trained[name], logs[name] = mil.fit(getattr(model, name), tr, va, obj, cfg)
        log.info("%s: best epoch %d, val loss %.4f", name, logs[name].best_epoch, logs[name].best_val_loss)
    out = PDLSModel(trained["upstream"], trained["suspect_sub"], trained["rest_sub"],
                    model.thresholds, model.color_stats)
    out.fit_logs = logs
    return out


def init_hierarchy(in_dim: int, config: HierarchyConfig, color_stats=None) -> PDLSModel:
    kw = dict(width=config.width, attention_dim=config.attention_dim, dropout_rate=config.dropout_rate)
    return PDLSModel(
        mil.BagModel.init(in_dim, UPSTREAM_HEADS, seed=[config.seed, 0], **kw),
        mil.BagModel.init(in_dim, mil.SUSPECT_SUB_HEADS, seed=[config.seed, 1], **kw),
        mil.BagModel.init(in_dim, REST_SUB_HEADS, seed=[config.seed, 2], **kw),
        color_stats=color_stats,
    )


def train_hierarchy(bags: Sequence, config: HierarchyConfig = HierarchyConfig(), color_stats=None) -> PDLSModel:
    """Train all three members from bags carrying six-class labels and train/val splits.

    The returned model has no thresholds; run :func:`calibrate_all` next.
    """
    train, val = split_bags(bags, "train"), split_bags(bags, "val")
    if not train or not val:
        raise InvalidInputError("need nonempty train and val splits")
    present = {SpecimenClass(b.label) for b in train}
    for cls in CLASSES:
        if cls not in present:
            raise DegenerateLabelsError(f"class {cls.value} missing from training data")
    model = init_hierarchy(train[0].tiles.shape[1], config, color_stats)
    return _fit_members(model, train, val, replace(config.fit, seed=config.seed))


def route(upstream_confidences) -> str:
    """Branch for ``(suspect, rest)`` upstream confidences; ties go to the suspect branch."""
    suspect, rest = upstream_confidences
    return SUSPECT if suspect >= rest else REST


@dataclass
class Prediction:
    specimen_id: str
    branch: str
    predicted: str
    confidence: float
    final: FinalLabel
    upstream_suspect_confidence: float
    confidences: Dict[str, ConfidenceVector] = field(repr=False, default_factory=dict)

    def class_scores(self) -> Dict[str, float]:
        """One-vs-rest scores for every class plus ``mel_suspect``, combining the upstream
        branch probability with the downstream class confidence.

        Intermediate and High are ranked with the high-vs-intermediate head. The
        int-vs-rest head never sees High bags during masked training, so it
        scores them as intermediate and cannot separate the two grades.
        """
        up = self.confidences["upstream"]
        p_s = up.get(mil.SUSPECT_VS_REST, MEL_SUSPECT)
        p_r = up.get(mil.SUSPECT_VS_REST, REST)
        sub = self.confidences["suspect_sub"]
        rest = self.confidences["rest_sub"]
        scores = {c.value: p_r * rest.get(mil.REST_CLASSES, c.value) for c in REST_CLASSES}
        scores[SpecimenClass.MEL_HIGH.value] = p_s * sub.get(mil.HIGH_VS_INT, "mel_high")
        scores[SpecimenClass.MEL_INT.value] = p_s * sub.get(mil.HIGH_VS_INT, "mel_int")
        scores[MEL_SUSPECT] = p_s
        return scores


def decide(branch: str, confidences: Dict[str, ConfidenceVector], thresholds: Optional[ThresholdSet]):
    """Routing-branch decision; returns ``(predicted, confidence, FinalLabel)``.

    Without thresholds the final label is the raw argmax prediction.
    """
    if branch == REST:
        predicted, conf = confidences["rest_sub"].argmax(mil.REST_CLASSES)
        if thresholds is None:
            return predicted, conf, FinalLabel(predicted)
        return predicted, conf, FinalLabel(predicted, not thresholds.passes_accuracy(predicted, conf))

    sub = confidences["suspect_sub"]
    p_high = sub.get(mil.HIGH_VS_REST, "mel_high")
    p_int = sub.get(mil.INT_VS_REST, "mel_int")
    if p_high >= p_int:
        predicted, conf = SpecimenClass.MEL_HIGH.value, p_high
    else:
        predicted, conf = SpecimenClass.MEL_INT.value, p_int
    if thresholds is None:
        return predicted, conf, FinalLabel(predicted)
    if predicted == SpecimenClass.MEL_HIGH.value:
        ok = thresholds.passes_accuracy(predicted, conf) and thresholds.passes_ppv(conf)
    else:
        ok = thresholds.passes_accuracy(predicted, conf)
    return predicted, conf, FinalLabel(predicted if ok else MEL_SUSPECT)


def _predict(model: PDLSModel, bag, mc: MCConfig, thresholds) -> Prediction:
    conf = {name: mc_confidence(m, bag, mc.n_passes, specimen_seed(mc.seed, bag.specimen_id, name))
            for name, m in model.members().items()}
    up = conf["upstream"]
    p_s = up.get(mil.SUSPECT_VS_REST, MEL_SUSPECT)
    p_r = up.get(mil.SUSPECT_VS_REST, REST)
    branch = route((p_s, p_r))
    predicted, c, final = decide(branch, conf, thresholds)
    return Prediction(bag.specimen_id, branch, predicted, c, final, p_s, conf)


def raw_predict(model: PDLSModel, bag, mc: MCConfig = MCConfig()) -> Prediction:
    """Inference without thresholds (used for calibration and ROC analysis)."""
    return _predict(model, bag, mc, None)


def infer_specimen(model: PDLSModel, bag, mc: MCConfig = MCConfig()) -> Prediction:
    if model.thresholds is None:
        raise MissingThresholdsError("model is not calibrated; run calibrate first")
    return _predict(model, bag, mc, model.thresholds)


def calibrate(model: PDLSModel, val_bags: Sequence, targets: CalibrationTargets = CalibrationTargets(),
              mc: MCConfig = MCConfig()) -> PDLSModel:
    out = replace(model, thresholds=calibrate_all(model, val_bags, targets, mc))
    out.fit_logs = model.fit_logs
    return out


def _largest_remainder(total: int, weights: Sequence[float]) -> List[int]:
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    rem = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base.tolist()


def select_calibration_set(bags: Sequence, n: int = 255, seed: int = 0) -> List:
    """Pick ``n`` bags with as equal a class distribution as the data allows."""
    rng = np.random.default_rng(seed)
    by_class = {c: [b for b in bags if SpecimenClass(b.label) == c] for c in CLASSES}
    by_class = {c: v for c, v in by_class.items() if v}
    if sum(len(v) for v in by_class.values()) < n:
        raise InvalidInputError(f"only {len(bags)} bags available, need {n}")
    quota = {c: 0 for c in by_class}
    left = n
    while left:
        open_ = [c for c in by_class if quota[c] < len(by_class[c])]
        share = _largest_remainder(left, [1.0] * len(open_))
        for c, s in zip(open_, share):
            add = min(s, len(by_class[c]) - quota[c])
            quota[c] += add
            left -= add
    chosen = []
    for c, group in by_class.items():
        idx = rng.permutation(len(group))[:quota[c]]
        chosen += [group[i] for i in sorted(idx)]
    return chosen


def stratified_partition(bags: Sequence, n_val: int, seed: int = 0):
    """Split bags into ``(train, val)`` with ``n_val`` validation bags spread across classes."""
    rng = np.random.default_rng(seed)
    classes = sorted({SpecimenClass(b.label).value for b in bags})
    groups = {c: [b for b in bags if SpecimenClass(b.label).value == c] for c in classes}
    quotas = _largest_remainder(n_val, [len(groups[c]) for c in classes])
    train, val = [], []
    for c, q in zip(classes, quotas):
        perm = rng.permutation(len(groups[c]))
        val_idx = set(perm[:q].tolist())
        for i, b in enumerate(groups[c]):
            (val if i in val_idx else train).append(b)
    return train, val


@dataclass
class FinetuneConfig:
    n_train: int = 210
    n_val: int = 45
    fit: mil.FitConfig = field(default_factory=mil.FitConfig)
    targets: CalibrationTargets = field(default_factory=CalibrationTargets)
    mc: MCConfig = field(default_factory=MCConfig)
    seed: int = 0


def finetune(model: PDLSModel, calibration_bags: Sequence, config: FinetuneConfig = FinetuneConfig()) -> PDLSModel:
    """Continue training all three members on a new lab's calibration set, then recalibrate.

    The calibration bags are split ``n_train``/``n_val`` (stratified by class);
    thresholds are recomputed on the validation part. Color statistics and
    any other preprocessing state are carried over untouched.
    """
    need = config.n_train + config.n_val
    if len(calibration_bags) < need:
        raise InvalidInputError(f"calibration set has {len(calibration_bags)} specimens, need {need}")
    pool = list(calibration_bags)
    if len(pool) > need:
        pool = select_calibration_set(pool, need, config.seed)
    train, val = stratified_partition(pool, config.n_val, config.seed)
    tuned = _fit_members(model, train, val, replace(config.fit, seed=config.fit.seed + 7919 * config.seed))
    tuned.color_stats = model.color_stats
    return calibrate(tuned, val, config.targets, config.mc)
