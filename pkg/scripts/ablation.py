"""Consensus versus non-consensus training over several seeds.

    python scripts/ablation.py --seeds 0 1 2 3 4
"""

import argparse
import logging

from dermtriage.evaluation import AblationConfig, ablation_datasets, ablation_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--identity-kernel", action="store_true", help="noise-free reviewers (control run)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    cfg = AblationConfig(seeds=tuple(args.seeds), identity_kernel=args.identity_kernel)
    kept, full, test = ablation_datasets(cfg)
    print(f"consensus set {len(kept)}, non-consensus set {len(full)}, shared test set {len(test)}")
    rep = ablation_experiment(cfg)
    for key in rep.keys():
        print(f"{key:12s} consensus {rep.mean('consensus', key):.3f}  non-consensus "
              f"{rep.mean('non_consensus', key):.3f}  delta {rep.delta(key):+.3f} +/- {rep.delta_std(key):.3f}")


if __name__ == "__main__":
    main()
