"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation, hierarchy, mil, persistence, qc, synth
from .config import Config, load_config, resolve
from .errors import ConfigError, PDLSError
from .taxonomy import CLASSES, MEL_SUSPECT, SpecimenClass
from .uncertainty import CalibrationTargets, MCConfig

log = logging.getLogger("dermtriage")

SUBCOMMANDS = ("synth-gen", "qc", "train", "calibrate", "finetune", "infer", "evaluate", "triage-sim", "ablation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config translation


def hierarchy_config(cfg: Config) -> hierarchy.HierarchyConfig:
    t = cfg.train
    fit = mil.FitConfig(max_epochs=t.max_epochs, patience=t.patience, lr=t.lr, accumulate=t.accumulate,
                        class_weighted=t.class_weighted, seed=t.seed)
    return hierarchy.HierarchyConfig(width=t.width, attention_dim=t.attention_dim or None,
                                     dropout_rate=t.dropout, fit=fit, seed=t.seed)


def calibration_targets(cfg: Config) -> CalibrationTargets:
    th = cfg.thresholds
    valid = {c.value for c in CLASSES}
    unknown = set(th.per_class) - valid
    if unknown:
        raise ConfigError(f"[thresholds] per_class has unknown classes {sorted(unknown)}")
    return CalibrationTargets({c: th.per_class.get(c, th.accuracy) for c in sorted(valid)}, th.ppv)


def kernel_diagonal(cfg: Config) -> dict:
    s = cfg.synth
    diag = {"mel_low": s.kernel_low, "mel_int": s.kernel_int, "mel_high": s.kernel_high}
    diag.update({c: s.kernel_other for c in ("basaloid", "squamous", "other")})
    return diag


def mc_config(cfg: Config) -> MCConfig:
    return MCConfig(cfg.mc.passes, cfg.mc.seed)


def with_seed(cfg: Config, seed: Optional[int]) -> Config:
    if seed is None:
        return cfg
    return dataclasses.replace(
        cfg,
        train=dataclasses.replace(cfg.train, seed=seed),
        mc=dataclasses.replace(cfg.mc, seed=seed),
        synth=dataclasses.replace(cfg.synth, seed=seed),
        qc=dataclasses.replace(cfg.qc, embed_seed=seed),
    )


class Context:
    def __init__(self, args, cfg: Config):
        self.args, self.cfg = args, cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stamp = not args.no_timestamp

    def path(self, value: str, what: str) -> Path:
        if not value:
            raise ConfigError(f"no {what} given")
        return resolve(self.args.config, value)

    def dataset(self, calibration: bool = False):
        d = self.cfg.data
        if calibration:
            return persistence.load_dataset(self.path(d.calibration_manifest, "[data] calibration_manifest"),
                                            self.path(d.calibration_embeddings, "[data] calibration_embeddings"))
        return persistence.load_dataset(self.path(d.manifest, "[data] manifest"),
                                        self.path(d.embeddings, "[data] embeddings"))

    def model(self):
        if self.args.model:
            return persistence.load_model(self.args.model)
        return persistence.load_model(self.path(self.cfg.data.model, "[data] model (or --model)"))

    def csv(self, name, header, rows, comments=()):
        persistence.write_csv(self.out / name, header, rows, comments, timestamp=self.stamp)
        log.info("wrote %s", self.out / name)


def _split(bags, split):
    if split == "all":
        return list(bags)
    chosen = hierarchy.split_bags(bags, split)
    if not chosen:
        raise PDLSError(f"dataset has no {split!r} specimens")
    return chosen


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(ctx: Context):
    s = ctx.cfg.synth
    protos = synth.PrototypeSet.make(s.dim, s.delta, s.sigma, seed=s.seed)
    params = synth.BagParams(tuple(s.n_tiles), tuple(s.diagnostic_fraction))
    shift = None
    if s.shift_mix or s.shift_offset or s.shift_scale != 1.0:
        shift = synth.DomainShift(s.shift_mix, s.shift_offset, s.shift_scale, seed=s.seed)
    bags = synth.gen_dataset({c: s.per_class for c in CLASSES}, protos, tuple(s.fractions), params,
                             seed=s.seed, lab_id=ctx.cfg.data.lab_id, shift=shift)
    if s.consensus:
        kernel = synth.make_kernel(kernel_diagonal(ctx.cfg), s.adjacent_share)
        kept, excluded = synth.apply_consensus_filter(bags, synth.simulate_panel(bags, kernel, s.seed))
        log.info("consensus kept %d of %d specimens", len(kept), len(bags))
        bags = kept
    persistence.save_dataset(bags, ctx.out / "manifest.csv", ctx.out / "embeddings.bin")
    if ctx.args.slides:
        _write_slides(ctx, ctx.args.slides, s.seed)
    return 0


def _write_slides(ctx: Context, n: int, seed: int):
    slide_dir = ctx.out / "slides"
    slide_dir.mkdir(exist_ok=True)
    rng = np.random.default_rng([seed, 55])
    rows = []
    for i in range(n):
        cls = CLASSES[i % len(CLASSES)]
        s = synth.gen_synthetic_slide(cls, ink=bool(rng.random() < 0.3), blur=bool(rng.random() < 0.3), rng=rng,
                                      size=(512, 512))
        sid = f"slide-{i:04d}"
        qc.write_slide(slide_dir / f"{sid}__0.png", qc.SlideImage(s.pixels, s.magnification, s.mpp))
        rows.append((sid, cls.value, "", "test"))
    persistence.write_csv(slide_dir / "labels.csv", ("specimen_id", "class", "diagnosis", "split"), rows)


def cmd_qc(ctx: Context):
    q = ctx.cfg.qc
    slide_dir = ctx.path(q.slides, "[qc] slides")
    labels_path = slide_dir / "labels.csv"
    if not labels_path.exists():
        raise PDLSError(f"{labels_path} not found")
    labels = {r["specimen_id"]: r for r in persistence.read_csv(labels_path)}
    files = sorted(p for p in slide_dir.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    by_specimen = {}
    for p in files:
        by_specimen.setdefault(p.stem.split("__")[0], []).append(qc.read_slide(p))
    missing = sorted(set(by_specimen) - set(labels))
    if missing:
        raise PDLSError(f"slide {missing[0]} has no row in labels.csv")
    ink_model = persistence.load_model(ctx.path(q.ink_model, "[qc] ink_model")) if q.ink_model else None
    threshold = q.blur_threshold
    if threshold < 0:
        all_tiles = [t for slides in by_specimen.values() for s in slides
                     for t in qc.tile_slide(s, qc.segment_tissue(s), q.min_tissue)]
        threshold = qc.calibrate_blur_threshold(all_tiles, q.blur_percentile) if all_tiles else 0.0
    embedder = qc.BuiltinEmbedder(q.embed_dim, q.embed_seed, q.embed_pool)
    bags, events = [], []
    for sid in sorted(by_specimen):
        res = qc.run_qc(by_specimen[sid], embedder, ink_model, threshold, ink_cutoff=q.ink_cutoff, specimen_id=sid)
        events += [(sid, e["position"], e["reason"], e["score"]) for e in res.log]
        if not len(res.tiles):
            log.warning("specimen %s has no tiles after QC; skipped", sid)
            continue
        row = labels[sid]
        bags.append(mil.SpecimenBag(sid, res.embeddings, SpecimenClass(row["class"]), ctx.cfg.data.lab_id,
                                    row.get("split") or "test", row.get("diagnosis") or None))
    persistence.save_dataset(bags, ctx.out / "manifest.csv", ctx.out / "embeddings.bin")
    ctx.csv("qc_log.csv", ("specimen_id", "tile_position", "reason", "score"), events,
            comments=[f"blur_threshold={threshold!r}"])
    return 0


def cmd_train(ctx: Context):
    bags = ctx.dataset()
    model = hierarchy.train_hierarchy(bags, hierarchy_config(ctx.cfg))
    persistence.save_model(model, ctx.out / "model.pdls")
    rows = [(name, e["epoch"], e["train_loss"], e["val_loss"]) for name, fl in model.fit_logs.items()
            for e in fl.epochs]
    ctx.csv("fit_log.csv", ("model", "epoch", "train_loss", "val_loss"), rows)
    return 0


def _threshold_rows(t):
    rows = [(c, "accuracy", t.targets.accuracy[c], t.accuracy[c], c in t.unattainable) for c in sorted(t.accuracy)]
    rows.append((SpecimenClass.MEL_HIGH.value, "ppv", t.targets.ppv, t.ppv, "ppv" in t.unattainable))
    return rows


def cmd_calibrate(ctx: Context):
    model = ctx.model()
    val = _split(ctx.dataset(), ctx.args.split or "val")
    model = hierarchy.calibrate(model, val, calibration_targets(ctx.cfg), mc_config(ctx.cfg))
    persistence.save_model(model, ctx.out / "model.pdls")
    ctx.csv("thresholds.csv", ("class", "kind", "target", "threshold", "unattainable"),
            _threshold_rows(model.thresholds))
    return 0


def cmd_finetune(ctx: Context):
    model = ctx.model()
    bags = ctx.dataset(calibration=True)
    t = ctx.cfg.train
    fcfg = hierarchy.FinetuneConfig(t.finetune_train, t.finetune_val, hierarchy_config(ctx.cfg).fit,
                                    calibration_targets(ctx.cfg), mc_config(ctx.cfg), t.seed)
    model = hierarchy.finetune(model, bags, fcfg)
    persistence.save_model(model, ctx.out / "model.pdls")
    ctx.csv("thresholds.csv", ("class", "kind", "target", "threshold", "unattainable"),
            _threshold_rows(model.thresholds))
    return 0


def _predict_all(ctx: Context, model, bags):
    mc = mc_config(ctx.cfg)
    return [hierarchy.infer_specimen(model, b, mc) for b in bags]


def cmd_infer(ctx: Context):
    model = ctx.model()
    bags = _split(ctx.dataset(), ctx.args.split or "all")
    preds = _predict_all(ctx, model, bags)
    header, rows = persistence.prediction_table(preds)
    ctx.csv("predictions.csv", header, rows)
    return 0


def cmd_evaluate(ctx: Context):
    model = ctx.model()
    test = _split(ctx.dataset(), ctx.args.split or "test")
    preds = _predict_all(ctx, model, test)
    header, rows = persistence.prediction_table(preds)
    ctx.csv("predictions.csv", header, rows)
    truths = [b.label for b in test]
    finals = [p.final for p in preds]
    metric_rows = []
    for mode in ("strict", "suspect_credit"):
        for label, r in evaluation.confusion_metrics(finals, truths, mode).items():
            metric_rows.append((mode, label, r.ppv, r.sensitivity, r.f1, r.balanced_accuracy, r.support))
    ctx.csv("metrics.csv", ("mode", "label", "ppv", "sensitivity", "f1", "balanced_accuracy", "support"),
            metric_rows)
    scores = {k: [p.class_scores()[k] for p in preds] for k in [c.value for c in CLASSES] + [MEL_SUSPECT]}
    auc_rows, roc_rows = [], []
    for k, s in scores.items():
        try:
            curve = evaluation.roc_auc_ovr({k: s}, truths)[k]
        except PDLSError as exc:
            log.warning("%s", exc)
            continue
        auc_rows.append((k, curve.auc))
        roc_rows += [(k, f, t, th) for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds)]
    ctx.csv("auc.csv", ("label", "auc"), auc_rows)
    ctx.csv("roc.csv", ("label", "fpr", "tpr", "threshold"), roc_rows)
    if all(b.diagnosis for b in test):
        drows = [(d, r.ppv, r.sensitivity, r.f1, r.balanced_accuracy, r.support) for d, r in
                 evaluation.diagnosis_report(finals, truths, [b.diagnosis for b in test]).items()]
        ctx.csv("diagnosis_metrics.csv", ("diagnosis", "ppv", "sensitivity", "f1", "balanced_accuracy", "support"),
                drows)
    return 0


def cmd_triage_sim(ctx: Context):
    a = ctx.args
    if a.predictions:
        rows = persistence.read_csv(a.predictions)
        bags = {b.specimen_id: b for b in ctx.dataset()}
        missing = [r["specimen_id"] for r in rows if r["specimen_id"] not in bags]
        if missing:
            raise PDLSError(f"specimen {missing[0]} in predictions is not in the dataset")
        ids = [r["specimen_id"] for r in rows]
        conf = [float(r["upstream_suspect_confidence"]) for r in rows]
        truths = [bags[i].label for i in ids]
    else:
        model = ctx.model()
        test = _split(ctx.dataset(), a.split or "test")
        preds = [hierarchy.raw_predict(model, b, mc_config(ctx.cfg)) for b in test]
        ids = [p.specimen_id for p in preds]
        conf = [p.upstream_suspect_confidence for p in preds]
        truths = [b.label for b in test]
    curve = evaluation.triage_simulation(conf, truths, ids, a.sims, a.caseload, seed=ctx.cfg.mc.seed)
    rows = list(zip(curve.fractions, curve.mean, curve.std))
    ctx.csv("triage.csv", ("fraction_reviewed", "mean_sensitivity", "std_sensitivity"), rows,
            comments=[f"S={a.sims}", f"simulations_used={curve.n_simulations}",
                      f"caseload={a.caseload or len(ids)}"])
    return 0


def cmd_ablation(ctx: Context):
    s = ctx.cfg.synth
    acfg = evaluation.AblationConfig(
        dim=s.dim, per_class=s.per_class, delta=s.delta, sigma=s.sigma,
        kernel_diagonal=kernel_diagonal(ctx.cfg), adjacent_share=s.adjacent_share,
        data_seed=s.seed, seeds=tuple(ctx.cfg.train.ablation_seeds), hierarchy=hierarchy_config(ctx.cfg),
        targets=calibration_targets(ctx.cfg), mc=mc_config(ctx.cfg))
    report = evaluation.ablation_experiment(acfg)
    rows = []
    for key in report.keys():
        rows.append((key, report.mean("consensus", key), report.std("consensus", key),
                     report.mean("non_consensus", key), report.std("non_consensus", key),
                     report.delta(key), report.delta_std(key)))
    ctx.csv("ablation.csv", ("metric", "consensus_mean", "consensus_std", "non_consensus_mean",
                             "non_consensus_std", "delta_mean", "delta_std"), rows,
            comments=[f"seeds={','.join(map(str, report.seeds))}"])
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen, "qc": cmd_qc, "train": cmd_train, "calibrate": cmd_calibrate,
    "finetune": cmd_finetune, "infer": cmd_infer, "evaluate": cmd_evaluate, "triage-sim": cmd_triage_sim,
    "ablation": cmd_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dermtriage", description="Hierarchical melanocytic triage pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp line from CSV outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("calibrate", "finetune", "infer", "evaluate", "triage-sim"):
            p.add_argument("--model", default=None, help="model file (overrides [data] model)")
        if name in ("calibrate", "infer", "evaluate", "triage-sim"):
            p.add_argument("--split", default=None, choices=("train", "val", "test", "all"))
        if name == "synth-gen":
            p.add_argument("--slides", type=int, default=0, help="also write this many synthetic slide images")
        if name == "triage-sim":
            p.add_argument("--sims", type=int, default=1000, help="number of simulated caseloads")
            p.add_argument("--caseload", type=int, default=None, help="specimens per caseload (default: pool size)")
            p.add_argument("--predictions", default=None, help="reuse a predictions CSV instead of running inference")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = with_seed(load_config(args.config), args.seed)
        return COMMANDS[args.command](Context(args, cfg))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (PDLSError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
