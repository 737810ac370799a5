"""Fine-tune a trained model on 255 specimens from a synthetic shifted lab.

    python scripts/domain_shift.py runs/e2e/model.pdls
"""

import argparse
import logging

from dermtriage import experiments, hierarchy, persistence, synth
from dermtriage.uncertainty import MCConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("model", help="model trained by end_to_end.py")
    ap.add_argument("--mix", type=float, default=None)
    ap.add_argument("--offset", type=float, default=None)
    ap.add_argument("--scale", type=float, default=None)
    ap.add_argument("--passes", type=int, default=100)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    cfg = experiments.DomainShiftConfig()
    s = cfg.shift
    shift = synth.DomainShift(args.mix if args.mix is not None else s.mix,
                              args.offset if args.offset is not None else s.offset_norm,
                              args.scale if args.scale is not None else s.scale, seed=s.seed)
    cfg = experiments.DomainShiftConfig(shift=shift)
    setup = experiments.SyntheticSetup()
    reference_test = hierarchy.split_bags(setup.dataset(), "test")
    res = experiments.run_domain_shift(persistence.load_model(args.model), reference_test, setup, cfg,
                                       MCConfig(args.passes, 0))
    print(f"suspect AUC reference lab {res.reference_auc:.4f}")
    print(f"suspect AUC shifted lab   {res.shifted_auc_before:.4f} before, {res.shifted_auc_after:.4f} after")


if __name__ == "__main__":
    main()
