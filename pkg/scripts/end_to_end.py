"""Train, calibrate and evaluate the hierarchy on the default synthetic dataset.

    python scripts/end_to_end.py --out runs/e2e
"""

import argparse
import logging
from pathlib import Path

from dermtriage import experiments, persistence


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--seed", type=int, default=7, help="data seed")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    cfg = experiments.EndToEndConfig(data=experiments.SyntheticSetup(seed=args.seed))
    res = experiments.run_end_to_end(cfg)
    out = Path(args.out)
    persistence.save_model(res.model, out / "model.pdls")
    persistence.save_dataset(res.bags, out / "manifest.csv", out / "embeddings.bin")
    header, rows = persistence.prediction_table(res.test_predictions)
    persistence.write_csv(out / "test_predictions.csv", header, rows)

    m = res.metrics
    for k, v in sorted(m.aucs.items()):
        print(f"AUC {k:10s} {v:.4f}")
    print(f"suspect sensitivity {m.suspect_sensitivity:.3f}")
    print(f"High PPV {m.high_ppv:.3f} over {m.n_high_predicted} calls (95% floor {m.ppv_floor(cfg.targets.ppv):.3f})")
    print("seconds", {k: round(v, 1) for k, v in res.seconds.items()})


if __name__ == "__main__":
    main()
