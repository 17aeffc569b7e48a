"""Desk-scale synthetic comparison of u-net^1/^2/^3, NTN^1/^2 and ANTN.

Usage: python3 scripts/run_desk_experiment.py [--seed N] [--out results.json]
"""

import argparse
import json
import logging

import numpy as np

from antn.experiment import desk_train_config, run_desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="write accuracies, distances, ratios and matrices as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = run_desk_experiment(desk_train_config(seed=args.seed))
    np.set_printoptions(precision=3, suppress=True)
    print("\nheld-out pixel accuracy")
    for name, acc in res.accuracy.items():
        print(f"  {name:6s} {acc:.4f}")
    for s, name in enumerate(("erosion", "dilation")):
        print(f"\nsource {s + 1} ({name})")
        print(f"  distance to expected: ANTN {res.transition_distance[f'antn{s + 1}']:.3f}"
              f"  NTN {res.transition_distance[f'ntn{s + 1}']:.3f}")
        print(f"  clean/noisy ratio: estimated {res.ratio_estimated[s]:.3g}  actual {res.ratio_actual[s]:.3g}")
        print("  expected\n", res.expected[s])
        print("  ANTN average\n", res.antn_average[s])
        print("  NTN Q\n", res.ntn_matrix[s])
    print(f"\n{res.seconds / 60:.1f} minutes")

    if args.out:
        with open(args.out, "w") as f:
            json.dump({
                "accuracy": res.accuracy,
                "transition_distance": res.transition_distance,
                "ratio_estimated": res.ratio_estimated,
                "ratio_actual": res.ratio_actual,
                "expected": [m.tolist() for m in res.expected],
                "antn_average": [m.tolist() for m in res.antn_average],
                "ntn_matrix": [m.tolist() for m in res.ntn_matrix],
                "log": res.log,
                "seconds": res.seconds,
            }, f, indent=1)


if __name__ == "__main__":
    main()
