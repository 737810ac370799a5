"""Worklist triage curve from a predictions CSV and the manifest holding the true classes.

    python scripts/triage.py runs/e2e/test_predictions.csv runs/e2e/manifest.csv --sims 1000
"""

import argparse

from dermtriage import persistence
from dermtriage.evaluation import triage_simulation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("predictions")
    ap.add_argument("manifest")
    ap.add_argument("--sims", type=int, default=1000)
    ap.add_argument("--caseload", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional curve CSV")
    args = ap.parse_args()

    rows = persistence.read_csv(args.predictions)
    truth = {r["specimen_id"]: r["class"] for r in persistence.read_manifest(args.manifest)}
    curve = triage_simulation([float(r["upstream_suspect_confidence"]) for r in rows],
                              [truth[r["specimen_id"]] for r in rows],
                              [r["specimen_id"] for r in rows], args.sims, args.caseload, seed=args.seed)
    for f in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0):
        print(f"reviewed {f:4.0%}  sensitivity {curve.at(f):.3f}")
    print(f"95% sensitivity reached after {curve.fraction_to_reach(0.95):.0%} of the caseload")
    if args.out:
        persistence.write_csv(args.out, ("fraction_reviewed", "mean_sensitivity", "std_sensitivity"),
                              zip(curve.fractions, curve.mean, curve.std), comments=[f"S={args.sims}"])


if __name__ == "__main__":
    main()
